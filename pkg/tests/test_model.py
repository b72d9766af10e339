import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltssl.model import (
    EmaState,
    NetworkParams,
    OptimizerState,
    add_grads,
    backward,
    backward_apply,
    ema_update,
    forward,
)
from ltssl.numerics import RandomStream

import oracles


def small_params(seed=0, C=4, d_in=5, hidden=8, d_proj=4, zero=False):
    return NetworkParams.init(d_in, hidden, C, d_proj, RandomStream(seed, "init"), zero=zero)


def test_zero_weights_give_uniform_probs():
    p = small_params(zero=True)
    res = forward(p, np.random.default_rng(0).standard_normal((7, 5)))
    np.testing.assert_allclose(res.probs, 0.25, atol=1e-15)
    assert res.z.shape == (7, 4)
    np.testing.assert_array_equal(res.z, 0.0)


def test_forward_shapes_and_determinism():
    a, b = small_params(3), small_params(3)
    x = np.random.default_rng(1).standard_normal((6, 5))
    ra, rb = forward(a, x), forward(b, x)
    assert ra.logits.shape == (6, 4) and ra.probs.shape == (6, 4)
    np.testing.assert_array_equal(ra.probs, rb.probs)
    np.testing.assert_allclose(ra.probs.sum(axis=1), 1.0, atol=1e-12)


def test_forward_matches_straight_line_oracle():
    p = small_params(5)
    x = np.random.default_rng(2).standard_normal((3, 5))
    probs, z = oracles.mlp(p.arrays, p.n_layers, x)
    res = forward(p, x)
    np.testing.assert_allclose(res.probs, probs, rtol=0, atol=1e-14)
    np.testing.assert_allclose(res.z, z, rtol=0, atol=1e-14)


@pytest.mark.parametrize("instance", range(3))
def test_loss_gradients_match_finite_differences(instance):
    errs = oracles.gradcheck_instance(instance)
    assert errs["masked"] > 0 and errs["ctr_valid"] > 0
    for term in ("sup", "un", "ctr"):
        assert errs[term] < 1e-4, (term, errs)


def test_encoder_gradient_is_sum_of_head_contributions():
    p = small_params(7)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5))
    res = forward(p, x)
    dl = rng.standard_normal((4, 4))
    dz = rng.standard_normal((4, 4))
    both = backward(p, res, dlogits=dl, dz=dz)
    summed = add_grads(backward(p, res, dlogits=dl), backward(p, res, dz=dz))
    for k in p.names():
        np.testing.assert_allclose(both[k], summed[k], atol=1e-14)


def test_adamw_zero_grad_without_decay_is_identity():
    p = small_params(1)
    opt = OptimizerState(p, weight_decay=0.0)
    new = backward_apply(p, opt, {k: np.zeros_like(v) for k, v in p.arrays.items()})
    for k in p.names():
        np.testing.assert_array_equal(new[k], p[k])


def test_adamw_first_step_scalar():
    p = NetworkParams({"w": np.array([1.0])}, 0)
    opt = OptimizerState(p, lr=1e-3, weight_decay=0.01)
    new = backward_apply(p, opt, {"w": np.array([0.5])})
    # w - lr*wd*w - lr * g / (|g| + eps) after bias correction
    assert new["w"][0] == pytest.approx(0.99899000002, abs=1e-13)
    assert new["w"][0] < 1.0


def test_non_finite_gradient_skips_update():
    p = small_params(2)
    opt = OptimizerState(p)
    grads = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    grads["head.b"][0] = np.nan
    assert backward_apply(p, opt, grads) is p
    assert opt.step == 0


def test_ema_example():
    p0 = NetworkParams({"w": np.array([0.0, 2.0])}, 0)
    p1 = NetworkParams({"w": np.array([1.0, 0.0])}, 0)
    ema = ema_update(EmaState.from_params(p0, 0.9), p1)
    np.testing.assert_allclose(ema.shadow["w"], [0.1, 1.8], atol=1e-15)


def test_ema_rejects_alpha_one():
    with pytest.raises(ValueError):
        EmaState.from_params(small_params(), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(0, 2**16))
def test_ema_stays_between_shadow_and_params(alpha, seed):
    rng = np.random.default_rng(seed)
    a = NetworkParams({"w": rng.standard_normal(5)}, 0)
    b = NetworkParams({"w": rng.standard_normal(5)}, 0)
    s = ema_update(EmaState.from_params(a, alpha), b).shadow["w"]
    lo = np.minimum(a["w"], b["w"]) - 1e-12
    hi = np.maximum(a["w"], b["w"]) + 1e-12
    assert np.all((s >= lo) & (s <= hi))
    # distance to the live params contracts by exactly alpha
    np.testing.assert_allclose(np.abs(s - b["w"]), alpha * np.abs(a["w"] - b["w"]), atol=1e-12)
