"""Color-space conversions and statistical color metrics.

Images are plain numpy arrays. The 8-bit domain uses ``uint8`` arrays of
shape ``(H, W, 3)`` (or ``(H, W)`` for gray); the float domain uses
``float64`` arrays with samples in ``[0, 1]`` and the same layouts.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageError(ValueError):
    """Raised for malformed image arrays or files."""


@dataclass(frozen=True)
class HsvStats:
    mean_saturation: float
    mean_brightness: float


def check_image8(img: np.ndarray, channels: tuple[int, ...] = (1, 3)) -> np.ndarray:
    """Validate an 8-bit image and return it unchanged.

    Gray images may be given as ``(H, W)`` or ``(H, W, 1)``.
    """
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8:
        raise ImageError("expected a uint8 array")
    if img.ndim == 2:
        nc = 1
    elif img.ndim == 3:
        nc = img.shape[2]
    else:
        raise ImageError(f"bad image rank {img.ndim}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError("image must be at least 1x1")
    if nc not in channels:
        raise ImageError(f"expected {channels} channels, got {nc}")
    return img


def _rgb_planes(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    check_image8(img, (3,))
    x = img.astype(np.int64)
    return x[..., 0], x[..., 1], x[..., 2]


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Integer BT.601 luma, ``floor((299 R + 587 G + 114 B) / 1000)``.

    Returns a 2-D ``uint8`` array. A gray input is returned as a copy.
    """
    check_image8(img)
    if img.ndim == 2:
        return img.copy()
    if img.shape[2] == 1:
        return img[..., 0].copy()
    r, g, b = _rgb_planes(img)
    return ((299 * r + 587 * g + 114 * b) // 1000).astype(np.uint8)


def gray_to_rgb(gray: np.ndarray) -> np.ndarray:
    """Replicate a gray image into three identical channels."""
    check_image8(gray, (1,))
    g = gray if gray.ndim == 2 else gray[..., 0]
    return np.repeat(g[..., None], 3, axis=2)


def rgb_to_hsv(r: float, g: float, b: float) -> tuple[float, float, float]:
    """Hexcone HSV for one pixel; hue in ``[0, 1)``, 0 for achromatic pixels."""
    mx = max(r, g, b)
    mn = min(r, g, b)
    v = mx
    if mx == 0.0:
        return 0.0, 0.0, v
    delta = mx - mn
    s = delta / mx
    if delta == 0.0:
        return 0.0, s, v
    if mx == r:
        h = ((g - b) / delta) % 6.0
    elif mx == g:
        h = (b - r) / delta + 2.0
    else:
        h = (r - g) / delta + 4.0
    h /= 6.0
    if h >= 1.0:
        h -= 1.0
    return h, s, v


def hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    if s == 0.0:
        return v, v, v
    h6 = (h % 1.0) * 6.0
    i = int(h6)
    f = h6 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rgb_to_hsv` over a ``(..., 3)`` float array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
        safe = np.where(delta > 0, delta, 1.0)
        hr = np.mod((g - b) / safe, 6.0)
        hg = (b - r) / safe + 2.0
        hb = (r - g) / safe + 4.0
    h = np.where(mx == r, hr, np.where(mx == g, hg, hb))
    h = np.where(delta > 0, h / 6.0, 0.0)
    h = np.where(h >= 1.0, h - 1.0, h)
    return np.stack([h, s, mx], axis=-1)


def colorfulness(img: np.ndarray) -> float:
    """Hasler-Suesstrunk colorfulness over opponent channels.

    ``sqrt(std_rg^2 + std_yb^2) + 0.3 * sqrt(mean_rg^2 + mean_yb^2)`` with
    population standard deviations, ``rg = R - G`` and ``yb = (R + G)/2 - B``.
    """
    check_image8(img, (3,))
    x = img.astype(np.float64)
    rg = x[..., 0] - x[..., 1]
    yb = 0.5 * (x[..., 0] + x[..., 1]) - x[..., 2]
    std_root = np.sqrt(rg.var() + yb.var())
    mean_root = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(std_root + 0.3 * mean_root)


def hsv_stats(img: np.ndarray) -> HsvStats:
    check_image8(img, (3,))
    hsv = rgb_to_hsv_array(img.astype(np.float64) / 255.0)
    return HsvStats(float(hsv[..., 1].mean()), float(hsv[..., 2].mean()))


def to_float(img: np.ndarray) -> np.ndarray:
    check_image8(img)
    return img.astype(np.float64) / 255.0


def from_float(img: np.ndarray) -> np.ndarray:
    """Clamp to ``[0, 1]`` and quantize with round-half-up."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def read_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB or gray PNG. Images with alpha are rejected."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA", "PA") or "transparency" in im.info:
            raise ImageError(f"{path}: alpha channel not supported")
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8).copy()
        if im.mode != "RGB":
            raise ImageError(f"{path}: unsupported PNG mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    check_image8(img)
    arr = img[..., 0] if img.ndim == 3 and img.shape[2] == 1 else img
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", optimize=False)
