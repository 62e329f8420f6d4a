"""Dataset filtering, the synthetic shape corpus and preference triplets."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugRange, AugRecord, apply_chain, sample_chain
from .color_math import (
    colorfulness,
    hsv_stats,
    read_png,
    rgb_to_gray,
    rgb_to_hsv_array,
    write_png,
)

log = logging.getLogger(__name__)

# hue bands of the two synthetic classes, as fractions of a turn
HUE_BANDS = {0: (5 / 360, 30 / 360), 1: (205 / 360, 235 / 360)}
CLASS_NAMES = {0: "warm", 1: "cool"}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    min_colorfulness: float = 15.0
    sat_window: tuple[float, float] = (0.3, 0.7)
    bright_window: tuple[float, float] = (0.4, 0.8)
    use_colorfulness: bool = True
    use_saturation: bool = True
    use_brightness: bool = True

    def __post_init__(self):
        for lo, hi in (self.sat_window, self.bright_window):
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError(f"bad window ({lo}, {hi})")

    @classmethod
    def preset(cls, name: str) -> "FilterSpec":
        if name == "basic-color":
            return cls(use_saturation=False, use_brightness=False)
        if name == "dpo":
            return cls()
        if name == "none":
            return cls(use_colorfulness=False, use_saturation=False, use_brightness=False)
        raise ValueError(f"unknown filter preset {name!r}")


@dataclass
class FilterReport:
    index: int
    colorfulness: float
    mean_saturation: float
    mean_brightness: float
    kept: bool
    reasons: list[str] = field(default_factory=list)


def _judge(i: int, img: np.ndarray, spec: FilterSpec) -> FilterReport:
    cf = colorfulness(img)
    st = hsv_stats(img)
    reasons = []
    if spec.use_colorfulness and not cf >= spec.min_colorfulness:
        reasons.append("colorfulness")
    if spec.use_saturation and not spec.sat_window[0] <= st.mean_saturation <= spec.sat_window[1]:
        reasons.append("saturation")
    if spec.use_brightness and not spec.bright_window[0] <= st.mean_brightness <= spec.bright_window[1]:
        reasons.append("brightness")
    return FilterReport(i, cf, st.mean_saturation, st.mean_brightness, not reasons, reasons)


def filter_dataset(images, spec: FilterSpec, workers: int = 1):
    """Keep images passing every enabled criterion (inclusive window bounds).

    Returns ``(kept_indices, reports)``; reports are in input order.
    """
    images = list(images)
    if not images:
        raise ValueError("filter_dataset needs at least one image")
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            reports = list(ex.map(lambda a: _judge(a[0], a[1], spec), enumerate(images)))
    else:
        reports = [_judge(i, img, spec) for i, img in enumerate(images)]
    kept = [r.index for r in reports if r.kept]
    return kept, reports


@dataclass
class Triplet:
    condition: np.ndarray  # (H, W) gray of the loser
    winner: np.ndarray
    loser: np.ndarray
    aug: AugRecord
    label: int = -1

    def validate(self) -> None:
        if self.winner.shape != self.loser.shape or self.condition.shape != self.winner.shape[:2]:
            raise ValueError("triplet images must share dimensions")
        if not np.array_equal(self.condition, rgb_to_gray(self.loser)):
            raise ValueError("triplet condition is not the grayscale of its loser")


def build_triplet(gt: np.ndarray, seed, aug_range: AugRange, label: int = -1) -> Triplet:
    rec = sample_chain(seed, aug_range)
    loser = apply_chain(gt, rec)
    return Triplet(rgb_to_gray(loser), gt.copy(), loser, rec, label)


def build_triplets(images, labels, seed: int, aug_range: AugRange) -> list[Triplet]:
    """One triplet per image; chain seeds come from one generator seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    return [build_triplet(img, rng, aug_range, int(lab)) for img, lab in zip(images, labels)]


def _draw_color(rng: np.random.Generator, label: int) -> np.ndarray:
    lo, hi = HUE_BANDS[label]
    h = rng.uniform(lo, hi)
    s = rng.uniform(0.7, 0.9)
    v = rng.uniform(0.85, 1.0) if label == 0 else rng.uniform(0.55, 0.75)
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def gen_synthetic_corpus(n: int, size: int = 16, palette_seed: int = 0):
    """Colored shapes over light neutral backgrounds.

    Class 0 ("warm") draws disks in orange-red hues, class 1 ("cool")
    draws rectangles in blue hues; classes alternate. Returns
    ``(images, labels)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 8 <= size <= 64:
        raise ValueError("size must be in [8, 64]")
    rng = np.random.default_rng(palette_seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    images, labels = [], []
    for k in range(n):
        label = k % 2
        bg = rng.uniform(0.8, 0.94)
        canvas = np.full((size, size, 3), bg)
        for _ in range(int(rng.integers(1, 3))):
            color = _draw_color(rng, label)
            if label == 0:
                r = rng.uniform(0.28, 0.4) * size
                cx, cy = rng.uniform(r * 0.8, size - r * 0.8, size=2)
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            else:
                w, h = rng.uniform(0.45, 0.7, size=2) * size
                x0 = rng.uniform(0, size - w)
                y0 = rng.uniform(0, size - h)
                mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
            canvas[mask] = color
        images.append(np.floor(canvas * 255 + 0.5).astype(np.uint8))
        labels.append(label)
    return images, labels


def dominant_hue(img: np.ndarray, min_saturation: float = 0.2) -> float | None:
    """Saturation-weighted circular mean hue (turn fraction) or None if achromatic."""
    hsv = rgb_to_hsv_array(img.astype(np.float64) / 255.0)
    h, s = hsv[..., 0].ravel(), hsv[..., 1].ravel()
    w = np.where(s >= min_saturation, s, 0.0)
    if w.sum() == 0:
        return None
    ang = 2 * np.pi * h
    c, d = (w * np.cos(ang)).sum(), (w * np.sin(ang)).sum()
    if math.hypot(c, d) < 1e-12:
        return None
    return (math.atan2(d, c) / (2 * np.pi)) % 1.0


def hue_class(img: np.ndarray) -> int:
    """Nearest synthetic class by circular hue distance; -1 if achromatic."""
    hue = dominant_hue(img)
    if hue is None:
        return -1
    best, best_d = -1, 2.0
    for label, (lo, hi) in HUE_BANDS.items():
        center = 0.5 * (lo + hi)
        d = abs(hue - center)
        d = min(d, 1 - d)
        if d < best_d:
            best, best_d = label, d
    return best


# -- manifests ---------------------------------------------------------------

def write_corpus(images, labels, directory: str | Path) -> Path:
    """Write PNGs plus ``corpus.tsv`` (path, label). Returns the index path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        rel = f"images/{i:05d}.png"
        write_png(directory / rel, img)
        lines.append(f"{rel}\t{int(lab)}\n")
    index = directory / "corpus.tsv"
    index.write_text("".join(lines), encoding="utf-8")
    return index


def read_corpus(index: str | Path):
    index = Path(index)
    images, labels = [], []
    for n, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(f"{index}:{n}: expected 2 fields, got {len(parts)}")
        path = index.parent / parts[0]
        if not path.exists():
            raise ManifestError(f"{index}:{n}: missing image {path}")
        images.append(read_png(path))
        labels.append(int(parts[1]))
    return images, labels


def write_manifest(triplets, path: str | Path) -> None:
    """Write triplet images next to ``path`` and one tab-separated record per triplet.

    Fields: condition_path, winner_path, loser_path, aug_token, label.
    """
    path = Path(path)
    img_dir = path.parent / (path.stem + "_images")
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, t in enumerate(triplets):
        rels = []
        for tag, img in (("c", t.condition), ("w", t.winner), ("l", t.loser)):
            rel = f"{img_dir.name}/{i:05d}_{tag}.png"
            write_png(path.parent / rel, img)
            rels.append(rel)
        lines.append("\t".join(rels + [t.aug.to_token(), str(int(t.label))]) + "\n")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    tmp.replace(path)


def read_manifest(path: str | Path) -> list[Triplet]:
    path = Path(path)
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{n}: expected 5 fields, got {len(parts)}")
        imgs = []
        for rel in parts[:3]:
            p = path.parent / rel
            if not p.exists():
                raise ManifestError(f"{path}:{n}: missing image {p}")
            imgs.append(read_png(p))
        try:
            aug = AugRecord.from_token(parts[3])
            label = int(parts[4])
        except ValueError as exc:
            raise ManifestError(f"{path}:{n}: {exc}") from None
        t = Triplet(imgs[0], imgs[1], imgs[2], aug, label)
        try:
            t.validate()
        except ValueError as exc:
            raise ManifestError(f"{path}:{n}: {exc}") from None
        out.append(t)
    return out
