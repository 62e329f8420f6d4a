"""``colorflux`` command line: dataset tools, staged training, colorization and scoring.

Every invocation creates a timestamped run directory under ``$COLORFLUX_RUN_ROOT``
(default ``./runs``) holding a copy of the config, the run log and a
``summary.json``. Trained checkpoints go to a shared checkpoint directory so
later stages can find earlier ones.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, evaluate, micronet, train
from .augment import AugRange
from .color_math import ImageError, gray_to_rgb, read_png, rgb_to_gray, write_png
from .dpo import DpoConfig, DpoStage
from .micronet import CheckpointError, NetConfig
from .pipeline import CONTROL_SCALE, DEFAULT_SEED, DEFAULT_STEPS, GUIDANCE_SCALE, ImageSet, colorize_batch, from_chw
from .pref_data import FilterSpec, ManifestError, build_triplets, filter_dataset, gen_synthetic_corpus, \
    read_corpus, write_corpus, write_manifest

log = logging.getLogger("colorflux")

RUN_ROOT_ENV = "COLORFLUX_RUN_ROOT"
EXIT_USAGE, EXIT_DIVERGED, EXIT_FAILED = 2, 3, 1

# CLI stage name -> (checkpoint stem, prerequisite CLI stage)
STAGE_ORDER = {
    "base": ("base", None),
    "structure": ("structure", "base"),
    "basic-color": ("basic_color", "structure"),
    "pro-dpo": ("pro_dpo", "basic-color"),
    "sft": ("sft", "basic-color"),
    "one-stage-dpo": ("one_stage_dpo", "basic-color"),
}
DPO_MODES = {"pro-dpo": "pro", "sft": "sft", "one-stage-dpo": "one-stage"}


class CliError(Exception):
    pass


# -- configuration ---------------------------------------------------------------

def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _window(s: str) -> tuple[float, float]:
    lo, hi = s.split(":")
    return float(lo), float(hi)


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


def _schema() -> dict:
    net = {f"net.{k}": (_opt_float if k == "lora_alpha" else type(v)) for k, v in asdict(NetConfig()).items()}
    schema = {"seed": int, **net}
    for stage in ("base", "structure", "basic_color"):
        for key, typ in (("learning_rate", float), ("epochs", int), ("batch_size", int), ("alpha", float),
                         ("t_dist", str), ("control_scale", float)):
            schema[f"train.{stage}.{key}"] = typ
    schema.update({
        "train.checkpoint_every": int,
        "data.n": int, "data.size": int, "data.holdout": int,
        "dpo.beta": float, "dpo.beta_mode": str, "dpo.batch_size": int, "dpo.ref_policy": str,
        "dpo.shared_noise": _bool, "dpo.lr_scale": float,
        "dpo.stage1.range": AugRange.parse, "dpo.stage1.lr": float, "dpo.stage1.epochs": int,
        "dpo.stage2.range": AugRange.parse, "dpo.stage2.lr": float, "dpo.stage2.epochs": int,
        "filter.preset": str, "filter.min_colorfulness": float,
        "filter.sat_window": _window, "filter.bright_window": _window,
        "paths.checkpoints": str,
        "colorize.resize": str, "colorize.min_size": int, "colorize.max_size": int,
        "eval.base_url": str, "eval.model": str, "eval.concurrency": int, "eval.max_retries": int,
        "eval.template": str, "eval.send_condition": _bool, "eval.token_env": str,
    })
    return schema


def load_config(path: str | Path | None) -> dict:
    """Parse a ``key = value`` file; blank lines and ``#`` comments are ignored.

    Raises:
        CliError: Unknown key, duplicate key or unparsable value, with the
            line number.
    """
    if path is None:
        return {}
    schema = _schema()
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise CliError(f"{path}:{n}: unknown config key {key!r}")
        if key in out:
            raise CliError(f"{path}:{n}: duplicate key {key!r}")
        try:
            out[key] = schema[key](value)
        except ValueError as exc:
            raise CliError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def net_config(conf: dict) -> NetConfig:
    return NetConfig(**{k[4:]: v for k, v in conf.items() if k.startswith("net.")})


def train_config(conf: dict, stage: str, seed: int) -> train.TrainConfig:
    pre = f"train.{stage}."
    return train.default_config(stage, seed, **{k[len(pre):]: v for k, v in conf.items() if k.startswith(pre)})


def dpo_config(conf: dict, net: NetConfig) -> DpoConfig:
    base = DpoConfig()
    stages = []
    for i, st in ((1, base.stage1), (2, base.stage2)):
        stages.append(DpoStage(conf.get(f"dpo.stage{i}.range", st.aug_range), conf.get(f"dpo.stage{i}.lr", st.learning_rate),
                               conf.get(f"dpo.stage{i}.epochs", st.epochs)))
    kw = {k[4:]: v for k, v in conf.items() if k.startswith("dpo.") and not k.startswith("dpo.stage")}
    return replace(base, stage1=stages[0], stage2=stages[1], lora_rank=net.lora_rank, **kw)


def filter_spec(conf: dict, preset: str | None) -> FilterSpec:
    spec = FilterSpec.preset(preset or conf.get("filter.preset", "basic-color"))
    kw = {}
    for key, field_name in (("filter.min_colorfulness", "min_colorfulness"), ("filter.sat_window", "sat_window"),
                            ("filter.bright_window", "bright_window")):
        if key in conf:
            kw[field_name] = conf[key]
    return replace(spec, **kw)


# -- run directories -------------------------------------------------------------

class Run:
    """Timestamped output directory plus the summary written on success."""

    def __init__(self, command: str, args: argparse.Namespace):
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        base = root / f"{stamp}-{command}"
        path, k = base, 1
        while path.exists():
            k += 1
            path = Path(f"{base}-{k}")
        path.mkdir(parents=True)
        self.root, self.dir, self.command = root, path, command
        self.summary = {"command": command, "version": __version__,
                        "args": {k: v for k, v in vars(args).items() if k != "func"}}
        if getattr(args, "config", None):
            shutil.copyfile(args.config, path / "config.txt")
        else:
            (path / "config.txt").write_text("# defaults only\n", encoding="utf-8")

    def finish(self, **fields) -> Path:
        self.summary.update(status="ok", **fields)
        out = self.dir / "summary.json"
        out.write_text(json.dumps(self.summary, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return out

    def fail(self, status: str, message: str) -> None:
        rec = dict(self.summary, status=status, error=message)
        (self.dir / "error.json").write_text(json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n",
                                             encoding="utf-8")


def _checkpoint_dir(run: Run, conf: dict, args) -> Path:
    d = Path(getattr(args, "checkpoints", None) or conf.get("paths.checkpoints") or run.root / "checkpoints")
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- commands --------------------------------------------------------------------

def cmd_gen(args, conf, run: Run) -> dict:
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    n = args.n if args.n is not None else conf.get("data.n", 200)
    size = args.size if args.size is not None else conf.get("data.size", 16)
    images, labels = gen_synthetic_corpus(n, size, seed)
    out = Path(args.out) if args.out else run.dir / "corpus"
    index = write_corpus(images, labels, out)
    print(index)
    return {"corpus": str(index), "n": n, "size": size, "seed": seed}


def _write_filtered(index: Path, kept, out: Path) -> Path:
    lines = [ln for ln in index.read_text(encoding="utf-8").splitlines() if ln.strip()]
    out.parent.mkdir(parents=True, exist_ok=True)
    rel_base = index.parent.resolve()
    rows = []
    for i in kept:
        path, label = lines[i].split("\t")
        rows.append(f"{os.path.relpath(rel_base / path, out.parent.resolve())}\t{label}\n")
    out.write_text("".join(rows), encoding="utf-8")
    return out


def cmd_filter(args, conf, run: Run) -> dict:
    spec = filter_spec(conf, args.preset)
    index = Path(args.corpus)
    images, _ = read_corpus(index)
    kept, reports = filter_dataset(images, spec, args.workers)
    out = Path(args.out) if args.out else run.dir / "filtered.tsv"
    _write_filtered(index, kept, out)
    with open(run.dir / "filter_report.tsv", "w", encoding="utf-8") as fh:
        fh.write("index\tcolorfulness\tmean_saturation\tmean_brightness\tkept\treasons\n")
        for r in reports:
            fh.write(f"{r.index}\t{r.colorfulness!r}\t{r.mean_saturation!r}\t{r.mean_brightness!r}\t"
                     f"{int(r.kept)}\t{','.join(r.reasons)}\n")
    print(f"kept {len(kept)} of {len(images)} -> {out}")
    return {"corpus": str(out), "kept": len(kept), "total": len(images), "filter": asdict(spec)}


def cmd_pairs(args, conf, run: Run) -> dict:
    images, labels = read_corpus(args.corpus)
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    triplets = build_triplets(images, labels, seed, args.range)
    out = Path(args.out) if args.out else run.dir / "pairs.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(triplets, out)
    print(out)
    return {"manifest": str(out), "n": len(triplets), "range": [args.range.lo, args.range.hi], "seed": seed}


def _split(images, labels, holdout: int):
    n = len(images)
    if n - holdout < 1:
        raise CliError(f"corpus of {n} images leaves nothing to train on with a hold-out of {holdout}")
    tr = ImageSet.from_images(images[:n - holdout], labels[:n - holdout])
    va = ImageSet.from_images(images[n - holdout:], labels[n - holdout:]) if holdout > 0 else tr
    return tr, va


def _load_prerequisite(stage: str, ckpt_dir: Path, net: NetConfig):
    prereq = STAGE_ORDER[stage][1]
    if prereq is None:
        return None
    path = ckpt_dir / f"{STAGE_ORDER[prereq][0]}.cflx"
    if not path.exists():
        raise CliError(f"stage {stage!r} needs the {prereq!r} checkpoint at {path}; "
                       f"run `colorflux train --stage {prereq}` first")
    try:
        return micronet.load_params(path, net)
    except CheckpointError as exc:
        raise CliError(f"cannot use {prereq!r} checkpoint: {exc}") from None


def cmd_train(args, conf, run: Run) -> dict:
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    net = net_config(conf)
    ckpt_dir = _checkpoint_dir(run, conf, args)
    prev = _load_prerequisite(args.stage, ckpt_dir, net)
    images, labels = read_corpus(args.corpus)
    holdout = conf.get("data.holdout", 40)
    every = conf.get("train.checkpoint_every", 1 if args.resume else 0)
    runlog = train.RunLog()
    stem = STAGE_ORDER[args.stage][0]
    out_path = ckpt_dir / f"{stem}.cflx"
    meta = {"stage": stem, "seed": seed, "guidance_scale": GUIDANCE_SCALE, "control_scale": CONTROL_SCALE}
    t0 = time.perf_counter()
    try:
        if args.stage in DPO_MODES:
            dcfg = dpo_config(conf, net)
            n_train = len(images) - holdout
            if n_train < 1:
                raise CliError(f"corpus of {len(images)} images leaves nothing to train on")
            schedule = {"pro": train.pro_dpo_schedule, "one-stage": train.one_stage_schedule,
                        "sft": train.sft_schedule}[DPO_MODES[args.stage]](dcfg)
            for st in schedule:
                trip = train.stage_triplets(images[:n_train], labels[:n_train], seed, st.name, st.aug_range)
                write_manifest(trip, run.dir / f"pairs_{st.name}.tsv")
            adapters, merged = train.run_stage_pro_dpo(
                dcfg, images[:n_train], labels[:n_train], prev, seed, DPO_MODES[args.stage], runlog,
                state_dir=ckpt_dir, checkpoint_every=every, resume=args.resume)
            micronet.save_params(adapters, ckpt_dir / f"{stem}_adapters.cflx", meta)
            micronet.save_params(merged, out_path, meta)
            meta["dpo"] = asdict(dcfg)
        else:
            tr, va = _split(images, labels, holdout)
            cfg = train_config(conf, stem, seed)
            if prev is None:
                prev = micronet.init_params(net, int(train.substream(seed, "init").integers(2**31)))
            runner = {"base": train.run_stage_base, "structure": train.run_stage_structure,
                      "basic_color": train.run_stage_basic_color}[stem]
            params = runner(cfg, tr, prev, va, runlog, state_path=ckpt_dir / f"{stem}.state",
                            checkpoint_every=every, resume=args.resume)
            micronet.save_params(params, out_path, meta)
            meta["train"] = asdict(cfg)
    finally:
        runlog.write(run.dir / "runlog.jsonl")
    shutil.copyfile(out_path, run.dir / out_path.name)
    vals = [r["val_loss"] for r in runlog.records if r.get("kind") == "epoch"]
    print(f"{args.stage}: val loss {vals[0]:.6f} -> {vals[-1]:.6f}; checkpoint {out_path}")
    return {"checkpoint": str(out_path), "stage": args.stage, "seed": seed, "val_first": vals[0],
            "val_last": vals[-1], "seconds": time.perf_counter() - t0, "meta": meta}


_RESAMPLE = {"bilinear": Image.BILINEAR, "nearest": Image.NEAREST}


def _resize(img: np.ndarray, size: tuple[int, int], method: str) -> np.ndarray:
    """Resize to ``(height, width)``; a no-op when the size already matches."""
    if img.shape[:2] == size:
        return img
    return np.asarray(Image.fromarray(img).resize((size[1], size[0]), _RESAMPLE[method]))


def _default_checkpoint(ckpt_dir: Path) -> Path:
    for stem in ("pro_dpo", "basic_color"):
        if (ckpt_dir / f"{stem}.cflx").exists():
            return ckpt_dir / f"{stem}.cflx"
    raise CliError(f"no pro_dpo or basic_color checkpoint in {ckpt_dir}; pass --checkpoint")


def cmd_colorize(args, conf, run: Run) -> dict:
    method = conf.get("colorize.resize", "bilinear")
    if method not in _RESAMPLE:
        raise CliError(f"colorize.resize must be one of {sorted(_RESAMPLE)}")
    lo, hi = conf.get("colorize.min_size", 4), conf.get("colorize.max_size", 4096)
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(_checkpoint_dir(run, conf, args))
    try:
        p = micronet.load_params(ckpt)
    except (CheckpointError, OSError) as exc:
        raise CliError(str(exc)) from None
    files = sorted(Path(args.input).glob("*.png"))
    if not files:
        raise CliError(f"no PNG files in {args.input}")
    grays, sizes = [], []
    for f in files:
        try:
            img = read_png(f)
        except (ImageError, OSError) as exc:
            raise CliError(f"unreadable input {f}: {exc}") from None
        if not (lo <= min(img.shape[:2]) and max(img.shape[:2]) <= hi):
            raise CliError(f"{f}: size {img.shape[1]}x{img.shape[0]} outside [{lo}, {hi}]")
        # preprocessing hook: identity at desk scale
        gray = img if img.ndim == 2 else rgb_to_gray(img)
        grays.append(gray)
        sizes.append(gray.shape)
    s = p.cfg.image_size
    batch = np.stack([_resize(g, (s, s), method) for g in grays]).astype(np.float64)[:, None] / 255.0
    samples = from_chw(colorize_batch(p, batch, args.seed, args.steps, CONTROL_SCALE))
    out = Path(args.out) if args.out else run.dir / "colorized"
    (out / "outputs").mkdir(parents=True, exist_ok=True)
    (out / "conditions").mkdir(parents=True, exist_ok=True)
    for f, g, size, smp in zip(files, grays, sizes, samples):
        write_png(out / "outputs" / f.name, _resize(smp, size, method))
        write_png(out / "conditions" / f.name, g)
    print(f"{len(files)} images -> {out}")
    return {"output": str(out), "checkpoint": str(ckpt), "steps": args.steps, "seed": args.seed,
            "n": len(files), "guidance_scale": GUIDANCE_SCALE, "resize": method}


def _endpoint(conf: dict, args) -> evaluate.EndpointConfig:
    url = args.endpoint or conf.get("eval.base_url")
    if not url:
        raise CliError("external mode needs --endpoint or eval.base_url")
    kw = dict(base_url=url, model=args.model or conf.get("eval.model", "judge"))
    for key in ("concurrency", "max_retries", "send_condition", "token_env"):
        if f"eval.{key}" in conf:
            kw[key] = conf[f"eval.{key}"]
    return evaluate.EndpointConfig(**kw)


def cmd_eval(args, conf, run: Run) -> dict:
    res = Path(args.results)
    out_dir, cond_dir = res / "outputs", res / "conditions"
    files = sorted(out_dir.glob("*.png"))
    if not files:
        raise CliError(f"no PNG outputs in {out_dir}")
    pairs = []
    for f in files:
        c = cond_dir / f.name
        if not c.exists():
            raise CliError(f"missing condition for {f.name} in {cond_dir}")
        pairs.append((read_png(f), read_png(c)))
    if args.mode == "proxy":
        scores = [evaluate.proxy_scores(c if c.ndim == 2 else rgb_to_gray(c),
                                        o if o.ndim == 3 else gray_to_rgb(o)) for o, c in pairs]
    else:
        ep = _endpoint(conf, args)
        ep.log_path = str(run.dir / "judge_log.jsonl")
        template = evaluate.load_template(args.template or conf.get("eval.template"))
        try:
            scores = evaluate.external_score_many(pairs, ep, template, [f.name for f in files])
        except evaluate.JudgeTransportError as exc:
            raise CliError(f"judge endpoint unreachable: {exc}") from None
    with open(run.dir / "scores.jsonl", "w", encoding="utf-8") as fh:
        for f, s in zip(files, scores):
            fh.write(json.dumps({"item": f.name, "source": s.source, **s.as_dict()}, sort_keys=True) + "\n")
    table = evaluate.aggregate(scores)
    label = args.label or res.name
    text = evaluate.format_table(table, label)
    (run.dir / "table.txt").write_text(text + "\n", encoding="utf-8")
    (run.dir / "aggregate.jsonl").write_text("\n".join(evaluate.table_records(table, label)) + "\n",
                                             encoding="utf-8")
    print(text)
    return {"mode": args.mode, "n": len(scores),
            "means": {a: (None if v is None else v.mean) for a, v in table.items()}}


def cmd_winrate(args, conf, run: Run) -> dict:
    try:
        ballots = evaluate.read_ballots(args.ballots)
    except (ValueError, OSError) as exc:
        raise CliError(str(exc)) from None
    methods = args.method or sorted({m for b in ballots for m in (b.method_a, b.method_b)})
    rates = {}
    for m in methods:
        try:
            rates[m] = evaluate.win_rate(ballots, m)
        except ZeroDivisionError as exc:
            raise CliError(str(exc)) from None
        print(f"{m}\t{rates[m]:.4f}")
    return {"ballots": len(ballots), "win_rates": rates}


# -- entry point -------------------------------------------------------------------

def _range(s: str) -> AugRange:
    try:
        return AugRange.parse(s)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="colorflux", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--config", help="key = value configuration file")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic two-class corpus")
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("filter", help="keep corpus images that pass a color filter")
    p.add_argument("--corpus", required=True)
    p.add_argument("--preset", "--filter-preset", choices=("basic-color", "dpo", "none"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("pairs", help="build a preference triplet manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--range", type=_range, required=True, help="augmentation factor range lo:hi")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=tuple(STAGE_ORDER))
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoints")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the stage's saved state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("colorize", help="colorize every PNG in a directory")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--checkpoints")
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out")
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("eval", help="score a colorize output directory")
    p.add_argument("--results", required=True)
    p.add_argument("--mode", choices=("proxy", "external"), default="proxy")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--template")
    p.add_argument("--label")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("winrate", help="win rates from a ballot file")
    p.add_argument("--ballots", required=True)
    p.add_argument("--method", action="append")
    p.set_defaults(func=cmd_winrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = load_config(args.config)
    except (CliError, OSError) as exc:
        print(f"colorflux: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run = Run(args.command, args)
    try:
        fields = args.func(args, conf, run)
    except (train.DivergenceError, FloatingPointError) as exc:
        run.fail("diverged", str(exc))
        print(f"colorflux: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CliError, ManifestError, CheckpointError, ValueError, OSError) as exc:
        run.fail("error", str(exc))
        print(f"colorflux: {exc}", file=sys.stderr)
        return EXIT_FAILED
    run.finish(run_dir=str(run.dir), **fields)
    return 0


if __name__ == "__main__":
    sys.exit(main())
