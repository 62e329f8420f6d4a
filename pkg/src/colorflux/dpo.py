"""Preference objectives for rectified flow and the progressive two-stage schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import micronet
from .augment import AugRange
from .flow import LossValue, fm_objective, noisy_sample
from .micronet import ModelParams

LN2 = math.log(2.0)


@dataclass(frozen=True)
class StageConfig:
    name: str
    trainable: tuple[str, ...]
    loss: str
    aug_range: AugRange | None
    learning_rate: float
    epochs: int
    batch_size: int = 16

    def __post_init__(self):
        if not self.trainable:
            raise ValueError(f"stage {self.name!r} has no trainable group")
        bad = set(self.trainable) - set(micronet.GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")


@dataclass(frozen=True)
class DpoStage:
    aug_range: AugRange
    learning_rate: float
    epochs: int


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 1000.0
    beta_mode: str = "constant"  # or "quadratic": beta * (1 - t)^2
    lora_rank: int = 4
    stage1: DpoStage = DpoStage(AugRange(0.5, 0.8), 4e-5, 2)
    stage2: DpoStage = DpoStage(AugRange(0.75, 0.95), 1e-5, 2)
    batch_size: int = 16
    ref_policy: str = "rebase"  # or "fixed"
    shared_noise: bool = False  # one eps for winner and loser branches
    lr_scale: float = 1.0  # multiplies every stage learning rate

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.beta_mode not in ("constant", "quadratic"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.ref_policy not in ("fixed", "rebase"):
            raise ValueError(f"unknown ref_policy {self.ref_policy!r}")


def beta_t(cfg: DpoConfig, t) -> np.ndarray | float:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if cfg.beta_mode == "quadratic":
        out = cfg.beta * (1.0 - t) ** 2
    else:
        out = np.full_like(t, cfg.beta)
    return float(out) if out.ndim == 0 else out


def softplus(x):
    return np.logaddexp(0.0, x)


def dpo_from_errors(err_policy_w, err_ref_w, err_policy_l, err_ref_l, bt):
    """Loss from squared-error sums: ``softplus((bt/2) * z)`` where
    ``z = (err_policy_w - err_ref_w) - (err_policy_l - err_ref_l)``.

    Identical to ``-log sigmoid(-(bt/2) z)``. Returns ``(loss, z)`` per item.
    """
    z = (np.asarray(err_policy_w) - err_ref_w) - (np.asarray(err_policy_l) - err_ref_l)
    return softplus(0.5 * np.asarray(bt) * z), z


def _sq_err(v_hat, v):
    d = v_hat - v
    return (d * d).reshape(d.shape[0], -1).sum(axis=1)


def dpo_loss(policy: ModelParams, ref: ModelParams, cond, x_w, x_l, t, eps_w, eps_l,
             prompt_w, prompt_l, cfg: DpoConfig, control_scale: float = 1.0,
             trainable=("lora",)) -> LossValue:
    """Flow-matching DPO loss averaged over a batch, with gradients for ``policy``.

    The reference is evaluated without gradients. Norms are sums over all
    elements of each image. Both branches share ``cond`` (the gray loser).
    """
    x_w = np.asarray(x_w, dtype=np.float64)
    x_l = np.asarray(x_l, dtype=np.float64)
    if x_w.shape != x_l.shape or np.shape(eps_w) != x_w.shape or np.shape(eps_l) != x_l.shape:
        raise ValueError("dpo_loss: winner/loser/noise shapes differ")
    B = x_w.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    nw = noisy_sample(x_w, eps_w, t)
    nl = noisy_sample(x_l, eps_l, t)
    vw, vl = nw.velocity, nl.velocity

    pw, trw = micronet.forward(policy, nw.x_t, t, cond, prompt_w, control_scale, True, trace=True)
    pl, trl = micronet.forward(policy, nl.x_t, t, cond, prompt_l, control_scale, True, trace=True)
    rw = micronet.forward(ref, nw.x_t, t, cond, prompt_w, control_scale, True)
    rl = micronet.forward(ref, nl.x_t, t, cond, prompt_l, control_scale, True)

    bt = beta_t(cfg, t)
    losses, z = dpo_from_errors(_sq_err(pw, vw), _sq_err(rw, vw), _sq_err(pl, vl), _sq_err(rl, vl), bt)
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(z))):
        raise FloatingPointError("non-finite value inside dpo_loss")
    # d loss_i / d z_i = (bt/2) * sigmoid((bt/2) z_i)
    a = 0.5 * bt * np.exp(-softplus(-0.5 * bt * z)) / B
    a4 = a[:, None, None, None]
    gw, _ = micronet.backward(policy, trw, a4 * 2.0 * (pw - vw), trainable)
    gl, _ = micronet.backward(policy, trl, -a4 * 2.0 * (pl - vl), trainable)
    grads = {k: gw[k] + gl[k] for k in gw}
    value = float(np.mean(losses))
    return LossValue(value, grads, None, {
        "dpo": value,
        "z_mean": float(np.mean(z)),
        "accuracy": float(np.mean(z < 0)),
    })


def sft_loss(policy: ModelParams, cond, x_w, t, eps, prompt, control_scale: float = 1.0,
             trainable=("lora",)) -> LossValue:
    """Supervised fine-tuning baseline: flow matching on ``(c, x_w)`` only."""
    return fm_objective(policy, x_w, eps, t, cond, prompt, control_scale, True, trainable)


def pro_dpo_schedule(cfg: DpoConfig) -> list[StageConfig]:
    """Coarse stage (strong fading) followed by a fine stage (milder fading)."""
    s1, s2 = cfg.stage1, cfg.stage2
    if not (s1.aug_range.lo <= s2.aug_range.lo and s1.aug_range.hi <= s2.aug_range.hi):
        raise ValueError("stage 2 augmentation range must be milder than stage 1")
    return [
        StageConfig(f"pro_dpo_{i}", ("lora",), "dpo", s.aug_range, s.learning_rate * cfg.lr_scale,
                    s.epochs, cfg.batch_size)
        for i, s in enumerate((s1, s2), 1)
    ]


def one_stage_schedule(cfg: DpoConfig) -> list[StageConfig]:
    """Non-progressive ablation: the union range for the combined epoch count.

    The learning rate keeps the same total ``lr * epochs`` budget as the
    two-stage schedule.
    """
    s1, s2 = cfg.stage1, cfg.stage2
    epochs = s1.epochs + s2.epochs
    lr = (s1.learning_rate * s1.epochs + s2.learning_rate * s2.epochs) / epochs
    rng = AugRange(min(s1.aug_range.lo, s2.aug_range.lo), max(s1.aug_range.hi, s2.aug_range.hi))
    return [StageConfig("one_stage_dpo", ("lora",), "dpo", rng, lr * cfg.lr_scale, epochs, cfg.batch_size)]


def sft_schedule(cfg: DpoConfig) -> list[StageConfig]:
    return [replace(st, name=st.name.replace("pro_dpo", "sft"), loss="sft") for st in pro_dpo_schedule(cfg)]
