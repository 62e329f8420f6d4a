"""Training phases, the Adam optimizer, seeding and resumable checkpoints.

Phases, in order:

``base``         trunk + phi_ref learn a color prior (no condition).
``structure``    the control branch learns to follow the gray condition,
                 prompted by phi_ref(ground truth).
``basic_color``  phi learns to prompt from gray input (flow matching plus
                 distillation towards phi_ref).
``pro_dpo``      low-rank adapters learn color preferences from triplets,
                 coarse range first, milder range second.
"""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import micronet
from .augment import AugRange
from .dpo import DpoConfig, StageConfig, dpo_loss, one_stage_schedule, pro_dpo_schedule, sft_loss, sft_schedule
from .flow import LossValue, combined_loss, distill_loss, fm_objective, sample_t
from .micronet import ModelParams
from .pipeline import ImageSet, gray_to_chw, to_chw
from .pref_data import build_triplets

log = logging.getLogger(__name__)

STAGES = ("base", "structure", "basic_color", "pro_dpo")
STAGE_GROUPS = {
    "base": ("trunk", "phi_ref"),
    "structure": ("control",),
    "basic_color": ("phi",),
    "pro_dpo": ("lora",),
}


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite."""


# -- seeding -------------------------------------------------------------------

def substream(master_seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of randomness."""
    return np.random.default_rng([int(master_seed), zlib.crc32(name.encode("utf-8"))])


def seed_everything(master_seed: int) -> Callable[[str], np.random.Generator]:
    """Return a factory of named substreams bound to ``master_seed``."""
    return lambda name: substream(master_seed, name)


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, grads: dict, state: AdamState, hyper: AdamHyper,
              names=None) -> None:
    """Bias-corrected Adam update, in place, restricted to ``names``."""
    names = list(grads) if names is None else list(names)
    for k in names:
        if not np.all(np.isfinite(grads[k])):
            raise DivergenceError(f"non-finite gradient for {k}")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k in names:
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(g))
        v = state.v.setdefault(k, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[k] -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


# -- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    stage: str
    trainable: tuple[str, ...]
    loss: str
    learning_rate: float
    epochs: int
    batch_size: int = 16
    alpha: float = 0.1
    seed: int = 0
    t_dist: str = "uniform"
    control_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dry_run: bool = False  # everything frozen; checks the masks

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.trainable and not self.dry_run:
            raise ValueError(f"stage {self.stage!r} trains nothing")
        frozen = set(micronet.GROUPS) - set(self.trainable)
        if frozen & set(self.trainable):
            raise ValueError("trainable and frozen groups overlap")

    @property
    def frozen(self) -> tuple[str, ...]:
        return tuple(g for g in micronet.GROUPS if g not in self.trainable)

    @property
    def hyper(self) -> AdamHyper:
        return AdamHyper(self.learning_rate, self.beta1, self.beta2, self.adam_eps)


def default_config(stage: str, seed: int = 0, **overrides) -> TrainConfig:
    """Desk-scale defaults for the three decoupled stages."""
    table = {
        "base": dict(loss="fm", learning_rate=3e-3, epochs=80),
        "structure": dict(loss="fm", learning_rate=3e-3, epochs=200),
        "basic_color": dict(loss="fm+distill", learning_rate=1e-2, epochs=150),
    }
    if stage not in table:
        raise ValueError(f"no default TrainConfig for stage {stage!r}")
    kw = dict(stage=stage, trainable=STAGE_GROUPS[stage], seed=seed, **table[stage])
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **rec) -> None:
        for k, v in rec.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise DivergenceError(f"non-finite {k} in run log")
        self.records.append(rec)

    def epoch_values(self, stage: str, key: str = "val_loss") -> list[float]:
        return [r[key] for r in self.records if r.get("stage") == stage and r.get("kind") == "epoch"]

    def step_values(self, stage: str, key: str = "loss") -> list[float]:
        return [r[key] for r in self.records if r.get("stage") == stage and r.get("kind") == "step"]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


# -- generic loop ------------------------------------------------------------------

BatchFn = Callable[[ModelParams, np.ndarray, np.random.Generator], LossValue]


def _state_arrays(params: ModelParams, opt: AdamState) -> dict:
    arrays = dict(params.arrays)
    for k in opt.m:
        arrays[f"adam.m.{k}"] = opt.m[k]
        arrays[f"adam.v.{k}"] = opt.v[k]
    return arrays


def save_state(path, params: ModelParams, opt: AdamState, epoch: int, runlog: RunLog, stage: str) -> None:
    records = [{k: v for k, v in r.items() if k != "wall"} for r in runlog.records]
    meta = {"kind": "train_state", "config": asdict(params.cfg), "stage": stage,
            "epoch": epoch, "adam_step": opt.step, "records": records}
    micronet.save_arrays(path, meta, _state_arrays(params, opt))


def load_state(path):
    meta, arrays = micronet.load_arrays(path)
    if meta.get("kind") != "train_state":
        raise micronet.CheckpointError(f"{path}: not a training state")
    cfg = micronet.NetConfig(**meta["config"])
    params = ModelParams(cfg, {k: v for k, v in arrays.items() if not k.startswith("adam.")})
    opt = AdamState(step=meta["adam_step"])
    for k, v in arrays.items():
        if k.startswith("adam.m."):
            opt.m[k[7:]] = v
        elif k.startswith("adam.v."):
            opt.v[k[7:]] = v
    return params, opt, meta["epoch"], RunLog(list(meta["records"])), meta["stage"]


def train_loop(stage: str, params: ModelParams, cfg: TrainConfig, n_items: int, batch_fn: BatchFn,
               val_fn: Callable[[ModelParams], float], runlog: RunLog,
               state_path=None, checkpoint_every: int = 0, resume: bool = False,
               stop_after_epoch: int | None = None) -> ModelParams:
    """Shuffle, batch, step; validate after every epoch.

    Per-epoch randomness comes from ``substream(seed, "<stage>/epoch<k>")`` so
    a run resumed from an epoch-boundary state matches an uninterrupted one.
    """
    if n_items < 1:
        raise ValueError(f"stage {stage!r}: empty training set")
    names = [k for k in params.arrays if micronet.group_of(k) in cfg.trainable and not cfg.dry_run]
    opt = AdamState()
    start = 0
    if resume and state_path is not None and Path(state_path).exists():
        params, opt, start, runlog_prev, saved_stage = load_state(state_path)
        if saved_stage != stage:
            raise ValueError(f"state file belongs to stage {saved_stage!r}")
        runlog.records[:] = runlog_prev.records
    else:
        runlog.append(stage=stage, kind="epoch", epoch=-1, val_loss=float(val_fn(params)))
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        rng = substream(cfg.seed, f"{stage}/epoch{epoch}")
        perm = rng.permutation(n_items)
        losses = []
        for b in range(0, n_items, cfg.batch_size):
            lv = batch_fn(params, perm[b:b + cfg.batch_size], rng)
            if not math.isfinite(lv.value):
                raise DivergenceError(f"{stage}: non-finite loss at epoch {epoch}")
            if names:
                adam_step(params, lv.grads, opt, cfg.hyper, names)
            losses.append(lv.value)
            runlog.append(stage=stage, kind="step", epoch=epoch, step=opt.step, loss=lv.value,
                          **{f"part_{k}": v for k, v in lv.parts.items()})
        val = float(val_fn(params))
        runlog.append(stage=stage, kind="epoch", epoch=epoch, train_loss=float(np.mean(losses)),
                      val_loss=val, wall=time.perf_counter() - t0)
        log.info("%s epoch %d train %.5f val %.5f", stage, epoch, np.mean(losses), val)
        if state_path is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_state(state_path, params, opt, epoch + 1, runlog, stage)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    return params


# -- validation --------------------------------------------------------------------

def _fixed_noise(seed: int, name: str, data: ImageSet):
    rng = substream(seed, name)
    t = sample_t(rng, len(data))
    eps = rng.standard_normal(data.rgb.shape)
    return t, eps


def validation_fm(p: ModelParams, data: ImageSet, seed: int = 0, mode: str = "inference") -> float:
    """Flow-matching loss on held-out data with fixed ``t`` and noise.

    ``mode`` picks the conditioning: ``base`` (no condition, phi_ref(gt)),
    ``structure`` (gray condition, phi_ref(gt)) or ``inference`` (gray
    condition, phi(gray)).
    """
    t, eps = _fixed_noise(seed, "validation", data)
    if mode == "base":
        prompt, cond = micronet.prompt_encode(p, data.rgb, "phi_ref"), None
    elif mode == "structure":
        prompt, cond = micronet.prompt_encode(p, data.rgb, "phi_ref"), data.gray
    elif mode == "inference":
        prompt, cond = micronet.prompt_encode(p, data.gray3, "phi"), data.gray
    else:
        raise ValueError(f"unknown validation mode {mode!r}")
    from .flow import fm_loss, noisy_sample

    ns = noisy_sample(data.rgb, eps, t)
    v = micronet.forward(p, ns.x_t, t, cond, prompt, 1.0, False)
    return fm_loss(v, data.rgb, eps).value


# -- stages ------------------------------------------------------------------------

def base_objective(p: ModelParams, x0, eps, t, trainable=("trunk", "phi_ref")) -> LossValue:
    """Unconditional flow matching prompted by ``phi_ref(x0)``; gradients reach ``phi_ref``."""
    prompt, tr = micronet.prompt_encode(p, x0, "phi_ref", trace=True)
    lv = fm_objective(p, x0, eps, t, None, prompt, 0.0, False, trainable)
    if "phi_ref" in trainable:
        for k, g in micronet.prompt_backward(p, tr, lv.d_input).items():
            lv.grads[k] += g
    return lv


def basic_color_objective(p: ModelParams, x0, gray, eps, t, alpha: float = 0.1, control_scale: float = 1.0,
                          trainable=("phi",)) -> LossValue:
    """``fm + alpha * distill`` with the prompt ``phi(gray)``; both terms reach ``phi``."""
    gray3 = np.repeat(gray, 3, axis=1)
    prompt, tr = micronet.prompt_encode(p, gray3, "phi", trace=True)
    fm = fm_objective(p, x0, eps, t, gray, prompt, control_scale, False, trainable)
    if "phi" in trainable:
        for k, g in micronet.prompt_backward(p, tr, fm.d_input).items():
            fm.grads[k] += g
    dl = distill_loss(p, gray3, x0, trainable)
    return combined_loss(fm, dl, alpha)


def run_stage_base(cfg: TrainConfig, data: ImageSet, params: ModelParams, val: ImageSet | None = None,
                   runlog: RunLog | None = None, **loop_kw) -> ModelParams:
    """Trunk and phi_ref learn unconditional colorization from phi_ref(gt)."""
    runlog = RunLog() if runlog is None else runlog
    val = data if val is None else val
    p = params.copy()

    def batch(pp, idx, rng):
        x0 = data.rgb[idx]
        t = sample_t(rng, len(idx), cfg.t_dist)
        eps = rng.standard_normal(x0.shape)
        return base_objective(pp, x0, eps, t, cfg.trainable)

    return train_loop("base", p, cfg, len(data), batch, lambda pp: validation_fm(pp, val, cfg.seed, "base"),
                      runlog, **loop_kw)


def run_stage_structure(cfg: TrainConfig, data: ImageSet, params: ModelParams, val: ImageSet | None = None,
                        runlog: RunLog | None = None, **loop_kw) -> ModelParams:
    """Only the control branch trains; the prompt carries ground-truth color."""
    runlog = RunLog() if runlog is None else runlog
    val = data if val is None else val
    p = params.copy()
    prompts = micronet.prompt_encode(p, data.rgb, "phi_ref")

    def batch(pp, idx, rng):
        x0 = data.rgb[idx]
        t = sample_t(rng, len(idx), cfg.t_dist)
        eps = rng.standard_normal(x0.shape)
        return fm_objective(pp, x0, eps, t, data.gray[idx], prompts[idx], cfg.control_scale, False,
                            cfg.trainable)

    return train_loop("structure", p, cfg, len(data), batch,
                      lambda pp: validation_fm(pp, val, cfg.seed, "structure"), runlog, **loop_kw)


def run_stage_basic_color(cfg: TrainConfig, data: ImageSet, params: ModelParams, val: ImageSet | None = None,
                          runlog: RunLog | None = None, init_phi_from_ref: bool = True,
                          **loop_kw) -> ModelParams:
    """Only phi trains, with ``fm + alpha * distill``; prompts come from gray input."""
    runlog = RunLog() if runlog is None else runlog
    val = data if val is None else val
    p = params.copy()
    if init_phi_from_ref:
        for k in list(p.arrays):
            if micronet.group_of(k) == "phi":
                p.arrays[k] = p.arrays["phi_ref." + k.split(".", 1)[1]].copy()

    def batch(pp, idx, rng):
        x0 = data.rgb[idx]
        t = sample_t(rng, len(idx), cfg.t_dist)
        eps = rng.standard_normal(x0.shape)
        trainable = () if cfg.dry_run else cfg.trainable
        return basic_color_objective(pp, x0, data.gray[idx], eps, t, cfg.alpha, cfg.control_scale, trainable)

    def val_fn(pp):
        fm = validation_fm(pp, val, cfg.seed, "inference")
        d = distill_loss(pp, val.gray3, val.rgb, ()).value
        runlog.append(stage="basic_color", kind="val_parts", fm=fm, distill=d)
        return fm + cfg.alpha * d

    return train_loop("basic_color", p, cfg, len(data), batch, val_fn, runlog, **loop_kw)


@dataclass
class TripletArrays:
    cond: np.ndarray
    winner: np.ndarray
    loser: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_triplets(cls, triplets) -> "TripletArrays":
        return cls(gray_to_chw([t.condition for t in triplets]), to_chw([t.winner for t in triplets]),
                   to_chw([t.loser for t in triplets]), np.array([t.label for t in triplets]))

    def __len__(self):
        return self.cond.shape[0]


def stage_triplets(images8, labels, master_seed: int, stage_name: str, aug_range: AugRange):
    """Triplets for one preference phase; the chain seed is a named substream."""
    seed = int(substream(master_seed, f"pairs/{stage_name}").integers(2**31))
    return build_triplets(images8, labels, seed, aug_range)


def make_stage_triplets(images8, labels, master_seed: int, stage_name: str, aug_range: AugRange) -> TripletArrays:
    return TripletArrays.from_triplets(stage_triplets(images8, labels, master_seed, stage_name, aug_range))


def _dpo_phase(st: StageConfig, policy: ModelParams, ref: ModelParams, trip: TripletArrays,
               dcfg: DpoConfig, seed: int, runlog: RunLog, **loop_kw) -> ModelParams:
    prompts = micronet.prompt_encode(policy, np.repeat(trip.cond, 3, axis=1), "phi")
    tcfg = TrainConfig(stage=st.name, trainable=st.trainable, loss=st.loss, learning_rate=st.learning_rate,
                       epochs=st.epochs, batch_size=st.batch_size, seed=seed)

    def batch(pp, idx, rng):
        B = len(idx)
        t = sample_t(rng, B)
        eps_w = rng.standard_normal(trip.winner[idx].shape)
        eps_l = eps_w if dcfg.shared_noise else rng.standard_normal(eps_w.shape)
        if st.loss == "sft":
            return sft_loss(pp, trip.cond[idx], trip.winner[idx], t, eps_w, prompts[idx], 1.0, st.trainable)
        return dpo_loss(pp, ref, trip.cond[idx], trip.winner[idx], trip.loser[idx], t, eps_w, eps_l,
                        prompts[idx], prompts[idx], dcfg, 1.0, st.trainable)

    def val_fn(pp):
        # fixed-noise preference loss on the first (up to) 32 triplets
        idx = np.arange(min(len(trip), 32))
        rng = substream(seed, f"{st.name}/val")
        t = sample_t(rng, len(idx))
        eps_w = rng.standard_normal(trip.winner[idx].shape)
        eps_l = eps_w if dcfg.shared_noise else rng.standard_normal(eps_w.shape)
        if st.loss == "sft":
            return sft_loss(pp, trip.cond[idx], trip.winner[idx], t, eps_w, prompts[idx], 1.0, ()).value
        return dpo_loss(pp, ref, trip.cond[idx], trip.winner[idx], trip.loser[idx], t, eps_w, eps_l,
                        prompts[idx], prompts[idx], dcfg, 1.0, ()).value

    return train_loop(st.name, policy, tcfg, len(trip), batch, val_fn, runlog, **loop_kw)


def run_stage_pro_dpo(dcfg: DpoConfig, images8, labels, params: ModelParams, seed: int = 0,
                      mode: str = "pro", runlog: RunLog | None = None, state_dir=None,
                      checkpoint_every: int = 0, resume: bool = False):
    """Preference fine-tuning of the adapters.

    ``mode`` is ``pro`` (two-stage schedule), ``one-stage`` or ``sft``.
    With ``state_dir``, each phase keeps its own resumable state file there.
    Returns ``(adapter_params, merged_params)``: the first still carries the
    unmerged adapters, the second has them folded into the trunk.
    """
    runlog = RunLog() if runlog is None else runlog
    schedule = {"pro": pro_dpo_schedule, "one-stage": one_stage_schedule, "sft": sft_schedule}[mode](dcfg)
    cfg = params.cfg
    if cfg.lora_rank != dcfg.lora_rank:
        raise ValueError(f"checkpoint lora rank {cfg.lora_rank} != DPO config rank {dcfg.lora_rank}")
    ref = params.copy()
    policy = micronet.reset_lora(params, int(substream(seed, "lora/init").integers(2**31)))
    ref = micronet.reset_lora(ref, 0)  # B = 0, so the reference is the pre-DPO model exactly
    for i, st in enumerate(schedule):
        if i > 0 and dcfg.ref_policy == "rebase":
            ref = micronet.merge_lora(policy)
        trip = make_stage_triplets(images8, labels, seed, st.name, st.aug_range)
        state_path = None if state_dir is None else Path(state_dir) / f"{st.name}.state"
        policy = _dpo_phase(st, policy, ref, trip, dcfg, seed, runlog, state_path=state_path,
                            checkpoint_every=checkpoint_every, resume=resume)
    return policy, micronet.merge_lora(policy)


# -- whole pipeline --------------------------------------------------------------------

def run_decoupled_stages(data: ImageSet, val: ImageSet, net_cfg: micronet.NetConfig, seed: int = 0,
                         configs: dict | None = None, runlog: RunLog | None = None) -> dict[str, ModelParams]:
    """base -> structure -> basic_color; returns every stage's parameters."""
    runlog = RunLog() if runlog is None else runlog
    configs = configs or {}
    out = {"init": micronet.init_params(net_cfg, int(substream(seed, "init").integers(2**31)))}
    prev = out["init"]
    runners = {"base": run_stage_base, "structure": run_stage_structure, "basic_color": run_stage_basic_color}
    for stage, fn in runners.items():
        cfg = configs.get(stage) or default_config(stage, seed)
        prev = fn(cfg, data, prev, val, runlog)
        out[stage] = prev
    return out


def sample_uint8(p: ModelParams, gray, seed: int = 0, steps: int = 8, use_lora: bool = False):
    from .pipeline import colorize_batch, from_chw

    return from_chw(colorize_batch(p, gray, seed, steps, 1.0, use_lora))


__all__ = [
    "AdamHyper", "AdamState", "adam_step", "TrainConfig", "default_config", "RunLog", "substream",
    "seed_everything", "train_loop", "run_stage_base", "run_stage_structure", "run_stage_basic_color",
    "run_stage_pro_dpo", "run_decoupled_stages", "validation_fm", "DivergenceError", "STAGES",
]
