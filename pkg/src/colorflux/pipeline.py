"""Glue between 8-bit images and the float NCHW batches the network consumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import micronet
from .color_math import from_float, rgb_to_gray
from .flow import euler_sample
from .micronet import ModelParams

DEFAULT_STEPS = 8
DEFAULT_SEED = 0
# inference guidance scale of the full-scale model; the micro network has no
# guidance input, so the value is carried as run metadata only
GUIDANCE_SCALE = 3.5
CONTROL_SCALE = 1.0


def to_chw(images) -> np.ndarray:
    """List of ``(H, W, 3)`` uint8 images to a ``(N, 3, H, W)`` float batch."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def gray_to_chw(grays) -> np.ndarray:
    arr = np.stack([np.asarray(g).reshape(g.shape[0], g.shape[1]) for g in grays]).astype(np.float64) / 255.0
    return arr[:, None]


def from_chw(batch) -> list[np.ndarray]:
    return [from_float(x.transpose(1, 2, 0)) for x in np.asarray(batch)]


@dataclass
class ImageSet:
    rgb: np.ndarray    # (N, 3, H, W) ground truth
    gray: np.ndarray   # (N, 1, H, W) gray of the ground truth
    labels: np.ndarray

    @classmethod
    def from_images(cls, images, labels=None) -> "ImageSet":
        images = list(images)
        labels = np.full(len(images), -1) if labels is None else np.asarray(labels)
        return cls(to_chw(images), gray_to_chw([rgb_to_gray(im) for im in images]), labels)

    def __len__(self):
        return self.rgb.shape[0]

    @property
    def gray3(self) -> np.ndarray:
        return np.repeat(self.gray, 3, axis=1)

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.rgb[idx], self.gray[idx], self.labels[idx])


def item_noise(seed: int, index: int, shape) -> np.ndarray:
    """Per-item starting noise, independent of batching."""
    return np.random.default_rng([seed, index]).standard_normal(shape)


def colorize_batch(p: ModelParams, gray, seed: int = DEFAULT_SEED, steps: int = DEFAULT_STEPS,
                   control_scale: float = CONTROL_SCALE, use_lora: bool = False,
                   batch_size: int = 64) -> np.ndarray:
    """Sample colorizations for a ``(N, 1, H, W)`` gray batch; returns floats in [0, 1]."""
    gray = np.asarray(gray, dtype=np.float64)
    n = gray.shape[0]
    shape = (3,) + gray.shape[2:]
    noise = np.stack([item_noise(seed, i, shape) for i in range(n)])
    out = np.empty((n,) + shape)
    for b in range(0, n, batch_size):
        g = gray[b:b + batch_size]
        prompt = micronet.prompt_encode(p, np.repeat(g, 3, axis=1), "phi")
        out[b:b + batch_size] = euler_sample(p, g, prompt, noise[b:b + batch_size], steps,
                                             control_scale, use_lora)
    return out
