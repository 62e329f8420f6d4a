import math

import numpy as np
import pytest

from colorflux import micronet
from colorflux.augment import AugRange
from colorflux.dpo import (
    LN2,
    DpoConfig,
    DpoStage,
    beta_t,
    dpo_from_errors,
    dpo_loss,
    one_stage_schedule,
    pro_dpo_schedule,
    sft_loss,
    sft_schedule,
)

from conftest import TINY
from gradcheck import check_param_grads


def triplet_batch(B=2, seed=0):
    rng = np.random.default_rng(seed)
    xw = rng.uniform(0, 1, (B, 3, 8, 8))
    xl = xw * 0.6
    cond = xl.mean(axis=1, keepdims=True)
    return (cond, xw, xl, rng.uniform(0, 1, B), rng.standard_normal(xw.shape), rng.standard_normal(xw.shape),
            rng.standard_normal((B, TINY.d_p)))


def test_default_schedule_values():
    cfg = DpoConfig()
    assert cfg.beta == 1000
    s1, s2 = pro_dpo_schedule(cfg)
    assert (s1.aug_range, s1.learning_rate, s1.epochs) == (AugRange(0.5, 0.8), 4e-5, 2)
    assert (s2.aug_range, s2.learning_rate, s2.epochs) == (AugRange(0.75, 0.95), 1e-5, 2)
    assert s1.trainable == s2.trainable == ("lora",)


def test_one_stage_keeps_the_lr_budget():
    (st,) = one_stage_schedule(DpoConfig())
    assert st.aug_range == AugRange(0.5, 0.95)
    assert st.epochs == 4
    assert st.learning_rate * 4 == pytest.approx(4e-5 * 2 + 1e-5 * 2, rel=1e-15)
    assert [s.loss for s in sft_schedule(DpoConfig())] == ["sft", "sft"]


def test_schedule_rejects_harsher_second_stage():
    cfg = DpoConfig(stage2=DpoStage(AugRange(0.3, 0.6), 1e-5, 2))
    with pytest.raises(ValueError, match="milder"):
        pro_dpo_schedule(cfg)


def test_beta_t_modes():
    assert beta_t(DpoConfig(), 0.3) == 1000.0
    q = DpoConfig(beta_mode="quadratic")
    assert beta_t(q, 0.0) == 1000.0 and beta_t(q, 1.0) == 0.0
    assert beta_t(q, 0.5) == pytest.approx(250.0)
    with pytest.raises(ValueError):
        beta_t(q, 1.5)
    with pytest.raises(ValueError):
        DpoConfig(beta=0)


def test_dpo_from_errors_closed_form():
    loss, z = dpo_from_errors(3.0, 1.0, 2.0, 1.5, 2.0)
    assert z == pytest.approx(1.5)
    assert loss == pytest.approx(math.log1p(math.exp(1.5)), rel=1e-15)
    # equivalent -log sigmoid form
    assert loss == pytest.approx(-math.log(1 / (1 + math.exp(1.5))), rel=1e-14)
    loss0, _ = dpo_from_errors(1.0, 1.0, 1.0, 1.0, 1000.0)
    assert loss0 == LN2
    big, _ = dpo_from_errors(1e6, 0.0, 0.0, 0.0, 1000.0)
    assert np.isfinite(big) and big == pytest.approx(5e8)


def test_identical_policy_and_reference_give_ln2():
    p = micronet.init_params(TINY, 0)
    for seed in range(5):
        cond, xw, xl, t, ew, el, pr = triplet_batch(3, seed)
        lv = dpo_loss(p, p, cond, xw, xl, t, ew, el, pr, pr, DpoConfig())
        assert abs(lv.value - LN2) <= 1e-12


def test_dpo_gradients(tiny_params):
    ref = micronet.reset_lora(tiny_params, 0)
    cond, xw, xl, t, ew, el, pr = triplet_batch()
    cfg = DpoConfig(beta=5.0)
    rep = check_param_grads(lambda p: dpo_loss(p, ref, cond, xw, xl, t, ew, el, pr, pr, cfg), tiny_params, ("lora",))
    assert rep.ok, rep.failures[:3]
    lv = dpo_loss(tiny_params, ref, cond, xw, xl, t, ew, el, pr, pr, cfg)
    assert not any(g.any() for k, g in lv.grads.items() if not k.startswith("lora."))


def test_sft_gradients(tiny_params):
    cond, xw, _, t, ew, _, pr = triplet_batch()
    rep = check_param_grads(lambda p: sft_loss(p, cond, xw, t, ew, pr), tiny_params, ("lora",))
    assert rep.ok, rep.failures[:3]


def test_dpo_shape_errors():
    p = micronet.init_params(TINY, 0)
    cond, xw, xl, t, ew, el, pr = triplet_batch()
    with pytest.raises(ValueError):
        dpo_loss(p, p, cond, xw, xl[:1], t, ew, el, pr, pr, DpoConfig())


def test_gradient_descent_prefers_the_winner():
    """A few plain gradient steps on the adapters lower the loss below ln 2."""
    p = micronet.reset_lora(micronet.init_params(TINY, 0), 11)
    ref = micronet.reset_lora(p, 0)
    cond, xw, xl, t, ew, el, pr = triplet_batch(4, 3)
    cfg = DpoConfig(beta=50.0)
    for _ in range(5):
        lv = dpo_loss(p, ref, cond, xw, xl, t, ew, el, pr, pr, cfg)
        for k, g in lv.grads.items():
            p.arrays[k] -= 1e-3 * g
    assert dpo_loss(p, ref, cond, xw, xl, t, ew, el, pr, pr, cfg).value < LN2
