"""Fading augmentations used to synthesize dispreferred ("loser") images.

Each adjuster blends the image with a degenerate image (black for
brightness, the rounded mean gray level for contrast, the grayscale
image for saturation) and quantizes with round-half-up.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from .color_math import check_image8, gray_to_rgb, rgb_to_gray, round_half_up


class AugKind(str, enum.Enum):
    BRIGHTNESS = "B"
    CONTRAST = "C"
    SATURATION = "S"


@dataclass(frozen=True)
class AugRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 < self.lo <= self.hi):
            raise ValueError(f"invalid augmentation range [{self.lo}, {self.hi}]")

    @classmethod
    def parse(cls, text: str) -> "AugRange":
        """Parse ``"lo:hi"``."""
        try:
            lo, hi = (float(p) for p in text.split(":"))
        except ValueError:
            raise ValueError(f"range must look like 'lo:hi', got {text!r}") from None
        return cls(lo, hi)

    def __str__(self):
        return f"{self.lo!r}:{self.hi!r}"


@dataclass(frozen=True)
class AugRecord:
    steps: tuple[tuple[AugKind, float], ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("augmentation record must have at least one step")
        kinds = [k for k, _ in self.steps]
        if len(set(kinds)) != len(kinds):
            raise ValueError("augmentation kinds must be distinct")

    def to_token(self, full: bool = True) -> str:
        """Serialize as ``"S:0.62|B:0.71"``; ``full`` keeps every float digit."""
        fmt = repr if full else (lambda f: f"{f:.2f}")
        return "|".join(f"{k.value}:{fmt(float(f))}" for k, f in self.steps)

    @classmethod
    def from_token(cls, token: str) -> "AugRecord":
        steps = []
        for part in token.split("|"):
            kind, _, factor = part.partition(":")
            steps.append((AugKind(kind), float(factor)))
        return cls(tuple(steps))


def _check_factor(f: float) -> None:
    if not f >= 0:
        raise ValueError(f"enhancement factor must be >= 0, got {f}")


def _blend(degenerate: np.ndarray, img: np.ndarray, f: float) -> np.ndarray:
    out = round_half_up(degenerate + f * (img.astype(np.float64) - degenerate))
    return np.clip(out, 0, 255).astype(np.uint8)


def adjust_brightness(img: np.ndarray, f: float) -> np.ndarray:
    check_image8(img)
    _check_factor(f)
    out = round_half_up(img.astype(np.float64) * f)
    return np.clip(out, 0, 255).astype(np.uint8)


def adjust_contrast(img: np.ndarray, f: float) -> np.ndarray:
    check_image8(img)
    _check_factor(f)
    gray = rgb_to_gray(img).astype(np.int64)
    m = float(np.floor(gray.sum() / gray.size + 0.5))
    return _blend(m, img, f)


def adjust_saturation(img: np.ndarray, f: float) -> np.ndarray:
    check_image8(img, (3,))
    _check_factor(f)
    degenerate = gray_to_rgb(rgb_to_gray(img)).astype(np.float64)
    return _blend(degenerate, img, f)


ADJUSTERS = {
    AugKind.BRIGHTNESS: adjust_brightness,
    AugKind.CONTRAST: adjust_contrast,
    AugKind.SATURATION: adjust_saturation,
}

# all 7 nonempty subsets of {B, C, S}, in a fixed order
SUBSETS = [
    combo
    for n in (1, 2, 3)
    for combo in itertools.combinations(list(AugKind), n)
]


def sample_chain(seed, rng_range: AugRange) -> AugRecord:
    """Draw a random nonempty, shuffled chain with factors uniform in the range.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    subset = list(SUBSETS[int(rng.integers(len(SUBSETS)))])
    order = rng.permutation(len(subset))
    steps = []
    for i in order:
        f = float(rng.uniform(rng_range.lo, rng_range.hi))
        steps.append((subset[i], min(max(f, rng_range.lo), rng_range.hi)))
    return AugRecord(tuple(steps))


def apply_chain(img: np.ndarray, rec: AugRecord) -> np.ndarray:
    out = img
    for kind, f in rec.steps:
        out = ADJUSTERS[kind](out, f)
    return out
