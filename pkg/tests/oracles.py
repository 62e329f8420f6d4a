"""Independent per-pixel reference implementations used by the tests.

Written with plain Python loops and ``math`` so they share no code path
with the vectorized implementations under test.
"""
import math

import numpy as np


def gray_pixel(r, g, b):
    return (299 * int(r) + 587 * int(g) + 114 * int(b)) // 1000


def gray_oracle(img):
    h, w = img.shape[:2]
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            out[y, x] = gray_pixel(*img[y, x])
    return out


def _q(v):
    v = math.floor(v + 0.5)
    return 0 if v < 0 else 255 if v > 255 else v


def brightness_oracle(img, f):
    out = np.zeros_like(img)
    for idx in np.ndindex(img.shape):
        out[idx] = _q(float(img[idx]) * f)
    return out


def contrast_oracle(img, f):
    h, w = img.shape[:2]
    total = 0
    for y in range(h):
        for x in range(w):
            total += gray_pixel(*img[y, x]) if img.ndim == 3 else int(img[y, x])
    m = float(math.floor(total / (h * w) + 0.5))
    out = np.zeros_like(img)
    for idx in np.ndindex(img.shape):
        out[idx] = _q(m + f * (float(img[idx]) - m))
    return out


def saturation_oracle(img, f):
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            d = float(gray_pixel(*img[y, x]))
            for c in range(3):
                out[y, x, c] = _q(d + f * (float(img[y, x, c]) - d))
    return out


def colorfulness_oracle(img):
    """Two-pass mean / population variance by direct summation."""
    h, w = img.shape[:2]
    n = h * w
    rg, yb = [], []
    for y in range(h):
        for x in range(w):
            r, g, b = (float(v) for v in img[y, x])
            rg.append(r - g)
            yb.append(0.5 * (r + g) - b)
    mrg = math.fsum(rg) / n
    myb = math.fsum(yb) / n
    vrg = math.fsum((a - mrg) ** 2 for a in rg) / n
    vyb = math.fsum((a - myb) ** 2 for a in yb) / n
    return math.sqrt(vrg + vyb) + 0.3 * math.sqrt(mrg ** 2 + myb ** 2)


def hsv_oracle(r, g, b):
    """Hexcone HSV through the piecewise sector construction."""
    mx, mn = max(r, g, b), min(r, g, b)
    if mx == 0:
        return 0.0, 0.0, 0.0
    c = mx - mn
    s = c / mx
    if c == 0:
        return 0.0, s, mx
    if r == mx:
        hp = (g - b) / c
        if hp < 0:
            hp += 6
    elif g == mx:
        hp = 2 + (b - r) / c
    else:
        hp = 4 + (r - g) / c
    h = hp / 6
    return (h - 1 if h >= 1 else h), s, mx


def winrate_oracle(lines, method):
    """Count ballots by hand from raw tab-separated lines."""
    wins = involved = 0
    for line in lines:
        item, a, b, winner = line.rstrip("\n").split("\t")
        if method not in (a, b):
            continue
        involved += 1
        chosen = a if winner == "a" else b
        wins += chosen == method
    return wins, involved
