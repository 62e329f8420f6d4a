"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 share a module-scoped fixture that trains the three
decoupled stages on the 200-image synthetic corpus once (a couple of minutes
on one core).
"""
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from colorflux import evaluate, micronet, train
from colorflux.augment import AugRange, adjust_brightness, adjust_contrast, adjust_saturation
from colorflux.color_math import colorfulness, hsv_stats, rgb_to_gray
from colorflux.dpo import LN2, DpoConfig, DpoStage, dpo_loss, sft_loss
from colorflux.flow import distill_loss, fm_objective
from colorflux.pipeline import ImageSet, colorize_batch, from_chw, gray_to_chw
from colorflux.pref_data import FilterSpec, build_triplets, filter_dataset, gen_synthetic_corpus, hue_class

from acceptance_log import criterion
from cli_pipeline import run_pipeline
from conftest import TINY
from gradcheck import check_param_grads
from oracles import brightness_oracle, colorfulness_oracle, contrast_oracle, gray_oracle, saturation_oracle, \
    winrate_oracle
from stub_judge import SIX, StubJudge, reply
from test_pref_data import CF_FIXTURES, WINDOW_FIXTURES, const

N_TRAIN, N_HOLDOUT = 160, 40
DPO_SEEDS = range(5)
# desk-scale adapters need a larger step than the large-model schedule; see README
DPO_LR_SCALE = 100.0


# -- 1 ------------------------------------------------------------------------------

def _grad_batch(seed=0, B=2):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0, 1, (B, 3, 8, 8))
    gray = x0.mean(axis=1, keepdims=True)
    xl = 0.6 * x0
    return dict(x0=x0, gray=gray, xl=xl, cond=xl.mean(axis=1, keepdims=True), t=rng.uniform(0.05, 0.95, B),
                eps=rng.standard_normal(x0.shape), eps2=rng.standard_normal(x0.shape),
                prompt=rng.standard_normal((B, TINY.d_p)))


def test_c1_gradient_correctness(tiny_params):
    with criterion(1, "analytic gradients match central differences") as info:
        t0 = time.perf_counter()
        d = _grad_batch()
        ref = micronet.reset_lora(tiny_params, 0)
        g3 = np.repeat(d["gray"], 3, axis=1)
        cases = {
            "fm[structure]": (lambda p: fm_objective(p, d["x0"], d["eps"], d["t"], d["gray"], d["prompt"], 1.0, False,
                                                     ("trunk", "control")), ("trunk", "control")),
            "fm[base]": (lambda p: train.base_objective(p, d["x0"], d["eps"], d["t"]), ("trunk", "phi_ref")),
            "distill": (lambda p: distill_loss(p, g3, d["x0"]), ("phi",)),
            "combined": (lambda p: train.basic_color_objective(p, d["x0"], d["gray"], d["eps"], d["t"], 0.1),
                         ("phi",)),
            "dpo": (lambda p: dpo_loss(p, ref, d["cond"], d["x0"], d["xl"], d["t"], d["eps"], d["eps2"], d["prompt"],
                                       d["prompt"], DpoConfig()), ("lora",)),
            "sft": (lambda p: sft_loss(p, d["cond"], d["x0"], d["t"], d["eps"], d["prompt"]), ("lora",)),
        }
        worst, checked = 0.0, 0
        for name, (fn, groups) in cases.items():
            rep = check_param_grads(fn, tiny_params, groups, h=1e-4, rel_tol=1e-4, abs_tol=1e-8)
            assert rep.checked > 0
            assert rep.ok, f"{name}: {rep.failures[:2]}"
            worst, checked = max(worst, rep.worst_rel), checked + rep.checked
        elapsed = time.perf_counter() - t0
        assert elapsed < 60, f"{elapsed:.1f}s"
        info["detail"] = f"{checked} elements over {len(cases)} losses, worst rel err {worst:.2e}"


# -- 2 ------------------------------------------------------------------------------

def test_c2_dpo_anchor(tiny_params):
    with criterion(2, "zero adapters give dpo_loss = ln 2") as info:
        t0 = time.perf_counter()
        ref = micronet.reset_lora(tiny_params, 0)
        worst = 0.0
        for k in range(100):
            policy = micronet.reset_lora(tiny_params, 1000 + k)  # different A, zero B
            d = _grad_batch(k, B=1)
            lv = dpo_loss(policy, ref, d["cond"], d["x0"], d["xl"], d["t"], d["eps"], d["eps2"], d["prompt"],
                          d["prompt"], DpoConfig())
            worst = max(worst, abs(lv.value - math.log(2)))
        assert LN2 == math.log(2)
        assert worst <= 1e-9, worst
        elapsed = time.perf_counter() - t0
        assert elapsed < 5, f"{elapsed:.1f}s"
        info["detail"] = f"100 cases, max |loss - ln 2| = {worst:.1e}"


# -- 3 ------------------------------------------------------------------------------

def test_c3_sampler_exactness_and_order():
    from colorflux.flow import euler_sample

    with criterion(3, "Euler sampler exactness and first-order error") as info:
        rng = np.random.default_rng(0)
        x0 = rng.uniform(0, 1, (3, 3, 8, 8))
        eps = rng.standard_normal(x0.shape)
        exact_err = max(np.max(np.abs(euler_sample(lambda x, t, c, p, s: eps - x0, None, None, eps, n, clamp=False)
                                      - x0)) for n in (1, 2, 3, 8, 16, 50, 128))
        assert exact_err <= 1e-12, exact_err
        a, b = -0.2, 1.3
        x1 = rng.standard_normal((1, 3, 4, 4))
        target = x1 - a - b / 2
        errs = [np.max(np.abs(euler_sample(lambda x, t, c, p, s: np.full_like(x, a + b * t), None, None, x1, n,
                                           clamp=False) - target)) for n in (8, 16, 32)]
        ratios = [errs[0] / errs[1], errs[1] / errs[2]]
        assert all(1.8 <= r <= 2.2 for r in ratios), ratios
        info["detail"] = f"constant field err {exact_err:.1e}; ratios {ratios[0]:.3f}, {ratios[1]:.3f}"


# -- 4 ------------------------------------------------------------------------------

def test_c4_bit_exact_color_pipeline():
    with criterion(4, "augmentations, gray, colorfulness and filter match oracles") as info:
        rng = np.random.default_rng(4)
        worst_cf = 0.0
        for _ in range(1000):
            img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
            fb, fc, fs = rng.uniform(0, 2, 3)
            np.testing.assert_array_equal(rgb_to_gray(img), gray_oracle(img))
            np.testing.assert_array_equal(adjust_brightness(img, fb), brightness_oracle(img, fb))
            np.testing.assert_array_equal(adjust_contrast(img, fc), contrast_oracle(img, fc))
            np.testing.assert_array_equal(adjust_saturation(img, fs), saturation_oracle(img, fs))
            worst_cf = max(worst_cf, abs(colorfulness(img) - colorfulness_oracle(img)))
        assert worst_cf <= 1e-9, worst_cf
        for rgb, keep in CF_FIXTURES:
            kept, _ = filter_dataset([const(rgb)], FilterSpec.preset("basic-color"))
            assert (kept == [0]) is keep, rgb
        for rgb, keep, reasons in WINDOW_FIXTURES:
            kept, reports = filter_dataset([const(rgb)], FilterSpec.preset("dpo"))
            assert (kept == [0]) is keep and reports[0].reasons == reasons, rgb
        info["detail"] = (f"1000 images bit-exact; colorfulness err {worst_cf:.1e}; "
                          f"{len(CF_FIXTURES) + len(WINDOW_FIXTURES)} filter fixtures")


# -- 5 ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run():
    imgs, labels = gen_synthetic_corpus(N_TRAIN + N_HOLDOUT, 16, 0)
    tr = ImageSet.from_images(imgs[:N_TRAIN], labels[:N_TRAIN])
    va = ImageSet.from_images(imgs[N_TRAIN:], labels[N_TRAIN:])
    log = train.RunLog()
    wall, cpu = time.perf_counter(), time.process_time()
    out = train.run_decoupled_stages(tr, va, micronet.NetConfig(), 0, None, log)
    return dict(imgs=imgs, labels=labels, val=va, stages=out, log=log,
                wall=time.perf_counter() - wall, cpu=time.process_time() - cpu)


@pytest.mark.slow
def test_c5_end_to_end_colorization(desk_run):
    with criterion(5, "desk-scale decoupled training colorizes held-out shapes") as info:
        va, out = desk_run["val"], desk_run["stages"]
        assert desk_run["cpu"] <= 600, f"{desk_run['cpu']:.0f}s CPU"
        fm0 = train.validation_fm(out["init"], va, 0, "inference")
        fm1 = train.validation_fm(out["basic_color"], va, 0, "inference")
        drop = 1 - fm1 / fm0
        samples = from_chw(colorize_batch(out["basic_color"], va.gray, 0, 8))
        acc = float(np.mean([hue_class(s) == lab for s, lab in zip(samples, va.labels)]))
        conds = [rgb_to_gray(i) for i in desk_run["imgs"][N_TRAIN:]]
        mae = float(np.mean([np.abs(rgb_to_gray(s).astype(float) - c).mean() for s, c in zip(samples, conds)]))
        assert drop >= 0.5, f"val FM drop {drop:.3f}"
        assert acc >= 0.9, f"hue accuracy {acc:.3f}"
        assert mae <= 8, f"gray MAE {mae:.2f}/255"
        info["detail"] = (f"val FM {fm0:.3f} -> {fm1:.3f} (drop {drop:.1%}), hue acc {acc:.3f}, "
                          f"gray MAE {mae:.2f}/255, {desk_run['cpu']:.0f}s CPU")


# -- 6 ------------------------------------------------------------------------------

def _mean_sat_cf(p, cond):
    s = train.sample_uint8(p, cond, 0, 8)
    return np.mean([hsv_stats(o).mean_saturation for o in s]), np.mean([colorfulness(o) for o in s])


@pytest.mark.slow
def test_c6_pro_dpo_direction(desk_run):
    with criterion(6, "Pro-DPO raises saturation/colorfulness and beats one-stage") as info:
        imgs, labels, base = desk_run["imgs"], desk_run["labels"], desk_run["stages"]["basic_color"]
        dcfg = DpoConfig(lr_scale=DPO_LR_SCALE)
        rows, wins = [], 0
        for seed in DPO_SEEDS:
            faded = build_triplets(imgs[N_TRAIN:], labels[N_TRAIN:], 1000 + seed, AugRange(0.5, 0.95))
            cond = gray_to_chw([t.condition for t in faded])
            pre = _mean_sat_cf(base, cond)
            _, pro_p = train.run_stage_pro_dpo(dcfg, imgs[:N_TRAIN], labels[:N_TRAIN], base, seed, "pro")
            _, one_p = train.run_stage_pro_dpo(dcfg, imgs[:N_TRAIN], labels[:N_TRAIN], base, seed, "one-stage")
            pro, one = _mean_sat_cf(pro_p, cond), _mean_sat_cf(one_p, cond)
            rows.append((seed, pre, pro, one))
            assert pro[0] > pre[0] and pro[1] > pre[1], f"seed {seed}: pre {pre} pro {pro}"
            wins += pro[1] >= one[1]
        assert wins >= 3, f"Pro-DPO >= one-stage on {wins}/5 seeds"
        s0 = rows[0]
        info["detail"] = (f"all 5 seeds above pre-DPO; Pro >= one-stage on {wins}/5; seed 0 colorfulness "
                          f"{s0[1][1]:.2f} -> {s0[2][1]:.2f} (one-stage {s0[3][1]:.2f})")


# -- 7 ------------------------------------------------------------------------------

def _snap(p):
    return {k: v.tobytes() for k, v in p.arrays.items()}


def _changed(before, p):
    return {micronet.group_of(k) for k, b in before.items() if b != p.arrays[k].tobytes()}


def test_c7_decoupling_masks():
    with criterion(7, "each stage mutates only its parameter groups") as info:
        imgs, labels = gen_synthetic_corpus(12, 8, 0)
        data = ImageSet.from_images(imgs, labels)
        p = micronet.init_params(TINY, 0)
        seen = []
        for stage, fn in (("base", train.run_stage_base), ("structure", train.run_stage_structure),
                          ("basic_color", train.run_stage_basic_color)):
            before = _snap(p)
            p = fn(train.default_config(stage, 0, epochs=1, batch_size=4), data, p)
            got = _changed(before, p)
            assert got == set(train.STAGE_GROUPS[stage]), (stage, got)
            seen.append(f"{stage}={'+'.join(sorted(got))}")
        dcfg = DpoConfig(lora_rank=TINY.lora_rank, batch_size=4, lr_scale=10.0,
                         stage1=DpoStage(AugRange(0.5, 0.8), 4e-5, 1), stage2=DpoStage(AugRange(0.75, 0.95), 1e-5, 1))
        for mode in ("pro", "one-stage", "sft"):
            before = _snap(p)
            adapters, merged = train.run_stage_pro_dpo(dcfg, imgs, labels, p, 0, mode)
            assert _changed(before, adapters) == {"lora"}, mode
            # the merge writes the adapter delta into the trunk weights only
            assert _changed(before, merged) - {"lora"} == {"trunk"}, mode
            seen.append(f"{mode}=lora")
        info["detail"] = ", ".join(seen)


# -- 8 ------------------------------------------------------------------------------

def test_c8_determinism(tmp_path):
    with criterion(8, "same seed gives byte-identical checkpoints and PNGs") as info:
        a = run_pipeline(tmp_path / "a", seed=5, n=24)
        b = run_pipeline(tmp_path / "b", seed=5, n=24)
        assert a == b
        c = run_pipeline(tmp_path / "c", seed=6, n=24)
        assert c["ckpt/pro_dpo.cflx"] != a["ckpt/pro_dpo.cflx"]
        n_ck = sum(k.endswith(".cflx") for k in a)
        info["detail"] = f"{n_ck} checkpoints and {len(a) - n_ck} PNGs identical; other seed differs"


# -- 9 ------------------------------------------------------------------------------

def test_c9_evaluation_plumbing(tmp_path):
    with criterion(9, "win rates and external scorer plumbing") as info:
        rng = np.random.default_rng(9)
        methods = ["ours", "base_a", "base_b", "base_c"]
        lines = ["# item\tmethod_a\tmethod_b\twinner"]
        for i in range(250):
            a, b = rng.choice(methods, 2, replace=False)
            lines.append(f"img{i:03d}\t{a}\t{b}\t{'ab'[rng.integers(2)]}")
        path = tmp_path / "ballots.tsv"
        path.write_text("\n".join(lines) + "\n")
        ballots = evaluate.read_ballots(path)
        assert len(ballots) == 250
        for m in methods:
            w, n = winrate_oracle(lines, m)
            assert evaluate.win_rate(ballots, m) == float(Fraction(w, n)), m

        img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        log_path = tmp_path / "judge.jsonl"
        cfg = lambda url: evaluate.EndpointConfig(url, "stub", backoff=0.01, max_retries=3, log_path=str(log_path))
        with StubJudge([(503, "busy"), (429, "slow down"), reply(SIX)]) as stub:
            s = evaluate.external_score(img, rgb_to_gray(img), cfg(stub.url), item="retry")
        assert s == evaluate.parse_scores(SIX) and len(stub.requests) == 3
        with StubJudge([reply("CRI: 50\nCRA: 50\n")]) as stub:
            with pytest.raises(evaluate.ScoreParseError) as err:
                evaluate.external_score(img, None, cfg(stub.url), item="broken")
        assert err.value.aspect == "ccs"
        recs = [json.loads(ln) for ln in log_path.read_text().splitlines()]
        assert [(r["item"], r["status"], r["retries"]) for r in recs] == [("retry", "ok", 2),
                                                                          ("broken", "parse_error", 0)]
        assert "CRA: 50" in recs[1]["raw"]
        info["detail"] = f"250 ballots exact for {len(methods)} methods; stub retry x2 and parse failure logged"
