"""Tiny conditional velocity network with hand-written forward/backward.

Topology, mirroring the full-scale system at desk scale:

* ``trunk``: a stack of 3x3 convolutions; every hidden block is FiLM
  modulated by ``[sinusoidal(t), prompt]`` and followed by SiLU. The
  last block projects back to 3 channels and is the velocity.
* ``control``: a hint convolution lifts the gray condition into image
  space, a copy of the first trunk block processes ``x_t + hint``, and
  zero-initialized 1x1 projections add residuals into every trunk block
  input (scaled by ``control_scale``).
* ``phi`` / ``phi_ref``: prompt encoders (two conv+SiLU blocks, global
  average pool, linear). ``phi_ref`` is the frozen color teacher.
* ``lora``: low-rank deltas ``(alpha / r) * B @ A`` on trunk conv weights.

Arrays are NCHW float64 batches. Parameters live in one flat dict whose
keys are ``"<group>.<layer>.<tensor>"``; the group prefix drives freezing.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

GROUPS = ("trunk", "control", "phi", "phi_ref", "lora")
MAGIC = b"CFLX"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 16
    channels: int = 16
    depth: int = 3
    kernel: int = 3
    d_p: int = 8
    lora_rank: int = 4
    lora_alpha: float | None = None  # defaults to the rank, i.e. a unit delta scale
    temb_dim: int = 16
    max_freq: float = 100.0

    def __post_init__(self):
        for name in ("image_size", "channels", "depth", "kernel", "d_p", "lora_rank", "temb_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.depth < 2:
            raise ValueError("trunk depth must be at least 2")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")

    @property
    def cond_dim(self) -> int:
        return self.temb_dim + self.d_p

    def block_channels(self) -> list[tuple[int, int]]:
        """(in, out) channels of every trunk conv."""
        ch = self.channels
        ins = [3] + [ch] * (self.depth - 1)
        outs = [ch] * (self.depth - 1) + [3]
        return list(zip(ins, outs))

    def lora_ranks(self) -> list[int]:
        # a weight whose smaller side is below the rank gets a full-rank adapter
        k2 = self.kernel * self.kernel
        return [min(self.lora_rank, cout, cin * k2) for cin, cout in self.block_channels()]

    def lora_factor(self, k: int) -> float:
        alpha = self.lora_rank if self.lora_alpha is None else self.lora_alpha
        return float(alpha) / self.lora_ranks()[k]


@dataclass
class ModelParams:
    cfg: NetConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.arrays[key]

    def group(self, name: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.split(".", 1)[0] == name}

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


# -- initialization ----------------------------------------------------------

def _uniform(rng, shape, fan_in, gain=math.sqrt(6.0)):
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_encoder(rng, cfg: NetConfig, prefix: str, arrays: dict) -> None:
    ch, k = cfg.channels, cfg.kernel
    arrays[f"{prefix}.conv0.w"] = _uniform(rng, (ch, 3, k, k), 3 * k * k)
    arrays[f"{prefix}.conv0.b"] = np.zeros(ch)
    arrays[f"{prefix}.conv1.w"] = _uniform(rng, (ch, ch, k, k), ch * k * k)
    arrays[f"{prefix}.conv1.b"] = np.zeros(ch)
    arrays[f"{prefix}.lin.w"] = _uniform(rng, (cfg.d_p, ch), ch, gain=1.0)
    arrays[f"{prefix}.lin.b"] = np.zeros(cfg.d_p)


def init_params(cfg: NetConfig, seed: int) -> ModelParams:
    """Seeded initialization.

    Control copies the first trunk block and zeroes its projections; every
    adapter ``B`` is zero, so neither branch changes the output at init.
    """
    rng = np.random.default_rng(seed)
    a: dict[str, np.ndarray] = {}
    k = cfg.kernel
    blocks = cfg.block_channels()
    for i, (cin, cout) in enumerate(blocks):
        gain = math.sqrt(6.0) if i < len(blocks) - 1 else 1.0
        a[f"trunk.conv{i}.w"] = _uniform(rng, (cout, cin, k, k), cin * k * k, gain)
        a[f"trunk.conv{i}.b"] = np.zeros(cout)
        if i < len(blocks) - 1:
            a[f"trunk.film{i}.w"] = _uniform(rng, (2 * cout, cfg.cond_dim), cfg.cond_dim, gain=0.5)
            a[f"trunk.film{i}.b"] = np.zeros(2 * cout)
    a["control.hint.w"] = _uniform(rng, (3, 1, k, k), k * k)
    a["control.hint.b"] = np.zeros(3)
    a["control.conv.w"] = a["trunk.conv0.w"].copy()
    a["control.conv.b"] = a["trunk.conv0.b"].copy()
    a["control.film.w"] = a["trunk.film0.w"].copy()
    a["control.film.b"] = a["trunk.film0.b"].copy()
    for i, (cin, _) in enumerate(blocks):
        a[f"control.zero{i}.w"] = np.zeros((cin, cfg.channels, 1, 1))
        a[f"control.zero{i}.b"] = np.zeros(cin)
    _init_encoder(rng, cfg, "phi_ref", a)
    for name in [n for n in a if n.startswith("phi_ref.")]:
        a["phi." + name.split(".", 1)[1]] = a[name].copy()
    for i, ((cin, cout), r) in enumerate(zip(blocks, cfg.lora_ranks())):
        a[f"lora.conv{i}.A"] = _uniform(rng, (r, cin * k * k), cin * k * k, gain=1.0)
        a[f"lora.conv{i}.B"] = np.zeros((cout, r))
    return ModelParams(cfg, a)


def reset_lora(p: ModelParams, seed: int) -> ModelParams:
    """Fresh adapters (random ``A``, zero ``B``) on a copy of ``p``."""
    rng = np.random.default_rng(seed)
    out = p.copy()
    for i, r in enumerate(p.cfg.lora_ranks()):
        fan_in = out[f"lora.conv{i}.A"].shape[1]
        out.arrays[f"lora.conv{i}.A"] = _uniform(rng, (r, fan_in), fan_in, gain=1.0)
        out.arrays[f"lora.conv{i}.B"][...] = 0.0
    return out


# -- small layers --------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _dsilu(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def time_embedding(t, dim: int, max_freq: float = 100.0) -> np.ndarray:
    """``[sin(w_i t), cos(w_i t)]`` with ``w_i`` geometric in ``[1, max_freq]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = max_freq ** (np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _film_forward(z, cvec, w, b):
    gb = cvec @ w.T + b
    c = z.shape[1]
    gamma, beta = gb[:, :c], gb[:, c:]
    y = z * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]
    return y, gamma


def _film_backward(dy, z, gamma, cvec, w):
    """Return ``(dz, dw, db, dcvec)`` for FiLM."""
    dz = dy * (1.0 + gamma[:, :, None, None])
    dgamma = (dy * z).sum(axis=(2, 3))
    dbeta = dy.sum(axis=(2, 3))
    dgb = np.concatenate([dgamma, dbeta], axis=1)
    return dz, dgb.T @ cvec, dgb.sum(axis=0), dgb @ w


def _as_batch(x, channels: int, size: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != channels or x.shape[2:] != (size, size):
        raise ValueError(f"{what}: expected (B, {channels}, {size}, {size}), got {x.shape}")
    return x


# -- prompt encoder ------------------------------------------------------------

def prompt_encode(p: ModelParams, img, prefix: str = "phi", trace: bool = False):
    """Embed a 3-channel image batch ``(B, 3, H, W)`` into ``(B, d_p)``."""
    cfg = p.cfg
    x = _as_batch(img, 3, cfg.image_size, "prompt_encode")
    z0 = kernels.conv2d_forward(x, p[f"{prefix}.conv0.w"], p[f"{prefix}.conv0.b"])
    a0 = _silu(z0)
    z1 = kernels.conv2d_forward(a0, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    a1 = _silu(z1)
    pooled = a1.mean(axis=(2, 3))
    emb = pooled @ p[f"{prefix}.lin.w"].T + p[f"{prefix}.lin.b"]
    if trace:
        return emb, {"prefix": prefix, "x": x, "z0": z0, "a0": a0, "z1": z1, "pooled": pooled}
    return emb


def prompt_backward(p: ModelParams, tr: dict, d_emb) -> dict[str, np.ndarray]:
    """Gradients of the encoder named by ``tr["prefix"]`` given ``dL/d emb``."""
    pre = tr["prefix"]
    d_emb = np.asarray(d_emb, dtype=np.float64)
    g = {f"{pre}.lin.w": d_emb.T @ tr["pooled"], f"{pre}.lin.b": d_emb.sum(axis=0)}
    d_pooled = d_emb @ p[f"{pre}.lin.w"]
    hw = tr["z1"].shape[2] * tr["z1"].shape[3]
    d_a1 = np.broadcast_to((d_pooled / hw)[:, :, None, None], tr["z1"].shape)
    dz1 = d_a1 * _dsilu(tr["z1"])
    d_a0, g[f"{pre}.conv1.w"], g[f"{pre}.conv1.b"] = kernels.conv2d_backward(tr["a0"], p[f"{pre}.conv1.w"], dz1)
    dz0 = d_a0 * _dsilu(tr["z0"])
    _, g[f"{pre}.conv0.w"], g[f"{pre}.conv0.b"] = kernels.conv2d_backward(tr["x"], p[f"{pre}.conv0.w"], dz0)
    return g


# -- velocity network ------------------------------------------------------------

def effective_weight(p: ModelParams, i: int, use_lora: bool) -> np.ndarray:
    w = p[f"trunk.conv{i}.w"]
    if not use_lora:
        return w
    delta = p.cfg.lora_factor(i) * (p[f"lora.conv{i}.B"] @ p[f"lora.conv{i}.A"])
    return w + delta.reshape(w.shape)


def forward(p: ModelParams, x_t, t, cond, prompt, control_scale: float = 1.0,
            use_lora: bool = False, trace: bool = False):
    """Predicted velocity ``(B, 3, H, W)``.

    ``t`` is a scalar or ``(B,)``; ``cond`` is ``(B, 1, H, W)`` or None
    (no control branch); ``prompt`` is ``(B, d_p)``.
    """
    cfg = p.cfg
    n = cfg.image_size
    x = _as_batch(x_t, 3, n, "x_t")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
    prompt = np.asarray(prompt, dtype=np.float64)
    if prompt.shape != (B, cfg.d_p):
        raise ValueError(f"prompt: expected ({B}, {cfg.d_p}), got {prompt.shape}")
    cvec = np.concatenate([time_embedding(t, cfg.temb_dim, cfg.max_freq), prompt], axis=1)
    depth = cfg.depth
    tr: dict = {"x": x, "cvec": cvec, "scale": float(control_scale), "use_lora": use_lora, "B": B}

    res = [None] * depth
    if cond is not None:
        c = _as_batch(cond, 1, n, "cond")
        hint = kernels.conv2d_forward(c, p["control.hint.w"], p["control.hint.b"])
        hc = x + hint
        zc = kernels.conv2d_forward(hc, p["control.conv.w"], p["control.conv.b"])
        yc, gc = _film_forward(zc, cvec, p["control.film.w"], p["control.film.b"])
        fc = _silu(yc)
        res = [kernels.conv2d_forward(fc, p[f"control.zero{i}.w"], p[f"control.zero{i}.b"]) for i in range(depth)]
        tr.update(cond=c, hc=hc, zc=zc, yc=yc, gc=gc, fc=fc)
    tr["has_cond"] = cond is not None

    h = x if res[0] is None else x + control_scale * res[0]
    hs, zs, ys, gs = [], [], [], []
    for i in range(depth):
        w = effective_weight(p, i, use_lora)
        hs.append(h)
        z = kernels.conv2d_forward(h, w, p[f"trunk.conv{i}.b"])
        zs.append(z)
        if i == depth - 1:
            out = z
            break
        y, g = _film_forward(z, cvec, p[f"trunk.film{i}.w"], p[f"trunk.film{i}.b"])
        ys.append(y)
        gs.append(g)
        h = _silu(y)
        if res[i + 1] is not None:
            h = h + control_scale * res[i + 1]
    tr.update(hs=hs, zs=zs, ys=ys, gs=gs)
    return (out, tr) if trace else out


def backward(p: ModelParams, tr: dict, d_out, trainable=None) -> tuple[dict, dict]:
    """Analytic gradients for a traced :func:`forward`.

    Returns ``(param_grads, input_grads)``. ``param_grads`` has an entry for
    every parameter; groups outside ``trainable`` (default: all) are exact
    zeros. ``input_grads`` holds ``x_t``, ``prompt`` and ``cond``.
    """
    if tr is None or "hs" not in tr:
        raise ValueError("backward needs the trace of a matching forward call")
    cfg = p.cfg
    trainable = set(GROUPS if trainable is None else trainable)
    grads = p.zeros_like()
    depth = cfg.depth
    s = tr["scale"]
    use_lora = tr["use_lora"]
    cvec = tr["cvec"]
    d_cvec = np.zeros_like(cvec)
    d_res = [None] * depth

    dh = np.asarray(d_out, dtype=np.float64)
    for i in reversed(range(depth)):
        if i < depth - 1:
            if tr["has_cond"]:
                d_res[i + 1] = s * dh
            dy = dh * _dsilu(tr["ys"][i])
            dz, dfw, dfb, dc = _film_backward(dy, tr["zs"][i], tr["gs"][i], cvec, p[f"trunk.film{i}.w"])
            grads[f"trunk.film{i}.w"] += dfw
            grads[f"trunk.film{i}.b"] += dfb
            d_cvec += dc
        else:
            dz = dh
        w = effective_weight(p, i, use_lora)
        dh, dw, db = kernels.conv2d_backward(tr["hs"][i], w, dz)
        grads[f"trunk.conv{i}.w"] += dw
        grads[f"trunk.conv{i}.b"] += db
        if use_lora:
            dw2 = dw.reshape(dw.shape[0], -1)
            f = cfg.lora_factor(i)
            grads[f"lora.conv{i}.B"] += f * dw2 @ p[f"lora.conv{i}.A"].T
            grads[f"lora.conv{i}.A"] += f * p[f"lora.conv{i}.B"].T @ dw2
    dx = dh.copy()
    d_cond = None
    if tr["has_cond"]:
        d_res[0] = s * dh
        d_fc = np.zeros_like(tr["fc"])
        for i in range(depth):
            dfi, dzw, dzb = kernels.conv2d_backward(tr["fc"], p[f"control.zero{i}.w"], d_res[i])
            grads[f"control.zero{i}.w"] += dzw
            grads[f"control.zero{i}.b"] += dzb
            d_fc += dfi
        dyc = d_fc * _dsilu(tr["yc"])
        dzc, dfw, dfb, dc = _film_backward(dyc, tr["zc"], tr["gc"], cvec, p["control.film.w"])
        grads["control.film.w"] += dfw
        grads["control.film.b"] += dfb
        d_cvec += dc
        dhc, grads["control.conv.w"], grads["control.conv.b"] = kernels.conv2d_backward(tr["hc"], p["control.conv.w"], dzc)
        dx += dhc
        d_cond, grads["control.hint.w"], grads["control.hint.b"] = kernels.conv2d_backward(tr["cond"], p["control.hint.w"], dhc)
    for name in grads:
        if group_of(name) not in trainable:
            grads[name][...] = 0.0
    inputs = {"x_t": dx, "prompt": d_cvec[:, cfg.temb_dim:].copy(), "cond": d_cond}
    return grads, inputs


def merge_lora(p: ModelParams) -> ModelParams:
    """Fold adapters into the trunk weights and clear them (``B`` zeroed)."""
    out = p.copy()
    for i in range(p.cfg.depth):
        out.arrays[f"trunk.conv{i}.w"] = effective_weight(p, i, True)
        out.arrays[f"lora.conv{i}.B"][...] = 0.0
    return out


# -- checkpoints -----------------------------------------------------------------

def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``CFLX`` container: magic, u32 version, JSON config block, blobs.

    Each blob: u16 name length, name, u8 ndim, u32 dims, little-endian f64 data.
    The write is atomic (temp file then rename).
    """
    path = Path(path)
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a CFLX checkpoint")
    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last blob")
    return meta, arrays


def save_params(p: ModelParams, path, extra_meta: dict | None = None) -> None:
    meta = {"kind": "params", "config": asdict(p.cfg)}
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(path, meta, p.arrays)


def load_params(path, cfg: NetConfig | None = None) -> ModelParams:
    """Load a checkpoint; with ``cfg``, reject any config or shape mismatch."""
    meta, arrays = load_arrays(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: missing config block")
    stored = NetConfig(**meta["config"])
    template = init_params(stored, 0)
    if cfg is not None and cfg != stored:
        want = init_params(cfg, 0)
        bad = [k for k in want.arrays if k not in arrays or arrays[k].shape != want[k].shape]
        raise CheckpointError(f"{path}: config mismatch; shape errors in {bad[:5] or 'config fields'}")
    for k, v in template.arrays.items():
        if k not in arrays or arrays[k].shape != v.shape:
            raise CheckpointError(f"{path}: shape error for {k}")
    return ModelParams(stored, {k: arrays[k] for k in template.arrays})


def params_digest(p: ModelParams, group: str | None = None) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in p.arrays.items():
        if group is None or group_of(k) == group:
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()


def clone_config(cfg: NetConfig, **changes) -> NetConfig:
    d = asdict(cfg)
    d.update(changes)
    return NetConfig(**d)


__all__ = [
    "NetConfig", "ModelParams", "init_params", "reset_lora", "prompt_encode", "prompt_backward",
    "forward", "backward", "merge_lora", "save_params", "load_params", "params_digest",
    "CheckpointError", "GROUPS", "time_embedding",
]
