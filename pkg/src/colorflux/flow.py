"""Rectified-flow primitives: noising, losses and the Euler sampler."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import micronet
from .micronet import ModelParams


@dataclass
class NoisySample:
    x_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    x0: np.ndarray

    @property
    def velocity(self) -> np.ndarray:
        return self.eps - self.x0


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] | None = None
    d_input: np.ndarray | None = None  # gradient wrt the loss input (v_hat, prompt, ...)
    parts: dict[str, float] = field(default_factory=dict)


def _bcast_t(t, x):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def noisy_sample(x0, eps, t) -> NoisySample:
    """``x_t = (1 - t) x0 + t eps``; ``t`` is a scalar or one value per batch item."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    tb = _bcast_t(t, x0)
    return NoisySample((1.0 - tb) * x0 + tb * eps, np.asarray(t, dtype=np.float64), eps, x0)


def sample_t(rng: np.random.Generator, size=None, dist: str = "uniform") -> np.ndarray | float:
    """Training timesteps. ``dist`` is ``uniform`` or ``logit-normal``."""
    if dist == "uniform":
        return rng.uniform(0.0, 1.0, size=size)
    if dist == "logit-normal":
        return 1.0 / (1.0 + np.exp(-rng.normal(size=size)))
    raise ValueError(f"unknown timestep distribution {dist!r}")


def fm_loss(v_hat, x0, eps) -> LossValue:
    """Mean squared error to the target velocity ``eps - x0``, with dL/dv_hat."""
    v_hat = np.asarray(v_hat, dtype=np.float64)
    diff = v_hat - (np.asarray(eps, dtype=np.float64) - np.asarray(x0, dtype=np.float64))
    if diff.shape != v_hat.shape:
        raise ValueError("fm_loss: shape mismatch")
    return LossValue(float(np.mean(diff * diff)), d_input=2.0 * diff / diff.size)


def fm_objective(p: ModelParams, x0, eps, t, cond, prompt, control_scale: float = 1.0,
                 use_lora: bool = False, trainable=None) -> LossValue:
    """Flow-matching loss of the network on a batch, with parameter gradients.

    ``d_input`` holds the gradient wrt ``prompt`` so callers can chain into
    a prompt encoder.
    """
    ns = noisy_sample(x0, eps, t)
    v_hat, tr = micronet.forward(p, ns.x_t, ns.t, cond, prompt, control_scale, use_lora, trace=True)
    lv = fm_loss(v_hat, x0, eps)
    grads, ig = micronet.backward(p, tr, lv.d_input, trainable)
    return LossValue(lv.value, grads, ig["prompt"], {"fm": lv.value})


def distill_loss(p: ModelParams, gray_img, gt_img, trainable=("phi",)) -> LossValue:
    """``||phi(gray) - phi_ref(gt)||^2`` summed over the embedding, averaged over the batch.

    Only ``phi`` receives gradients; ``phi_ref`` is the frozen teacher.
    """
    emb, tr = micronet.prompt_encode(p, gray_img, "phi", trace=True)
    target = micronet.prompt_encode(p, gt_img, "phi_ref")
    diff = emb - target
    B = diff.shape[0]
    value = float(np.sum(diff * diff) / B)
    grads = p.zeros_like()
    if "phi" in set(trainable):
        grads.update(micronet.prompt_backward(p, tr, 2.0 * diff / B))
    return LossValue(value, grads, None, {"distill": value})


def combined_loss(fm: LossValue, distill: LossValue, alpha: float = 0.1) -> LossValue:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    grads = None
    if fm.grads is not None and distill.grads is not None:
        grads = {k: fm.grads[k] + alpha * distill.grads[k] for k in fm.grads}
    return LossValue(fm.value + alpha * distill.value, grads, None,
                     {"fm": fm.value, "distill": distill.value})


def euler_sample(model, cond, prompt, noise, steps: int = 8, control_scale: float = 1.0,
                 use_lora: bool = False, clamp: bool = True, seed: int | None = None) -> np.ndarray:
    """Integrate the velocity field from ``t = 1`` (noise) to ``t = 0`` on a uniform grid.

    ``model`` is either :class:`ModelParams` or a callable
    ``f(x, t, cond, prompt, control_scale) -> v``. When ``noise`` is None it
    is drawn from ``seed`` with the shape implied by ``cond``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if noise is None:
        if seed is None:
            raise ValueError("either noise or seed is required")
        shape = (np.asarray(cond).shape[0], 3) + np.asarray(cond).shape[2:]
        noise = np.random.default_rng(seed).standard_normal(shape)
    x = np.array(noise, dtype=np.float64, copy=True)
    if isinstance(model, ModelParams):
        def f(xx, tt, cc, pp, ss):
            return micronet.forward(model, xx, tt, cc, pp, ss, use_lora)
    else:
        f = model
    dt = 1.0 / steps
    for k in range(steps, 0, -1):
        x = x - dt * f(x, k / steps, cond, prompt, control_scale)
    return np.clip(x, 0.0, 1.0) if clamp else x
