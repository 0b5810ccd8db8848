import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgftseg import losses
from cgftseg.errors import InvalidConfig, InvalidInput


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_dice_perfect_and_half_overlap():
    gt = np.array([[1, 1], [0, 0]])
    assert losses.dice_loss(gt.astype(float), gt) == 0.0
    # sum(p*g)=1, sum(p)=2, sum(g)=2
    half = np.full((2, 2), 0.5)
    assert losses.dice_loss(half, gt, eps=0.0) == pytest.approx(0.5, abs=1e-15)
    assert losses.dice_loss(half, gt) == pytest.approx(1 - (2 + 1e-6) / (4 + 1e-6), abs=1e-15)


def test_dice_empty_mask_and_prediction():
    z = np.zeros((4, 4))
    assert losses.dice_loss(z, z) == 0.0
    assert losses.dice_loss(z, z, eps=0.0) == 0.0


def test_dice_rejects_soft_ground_truth():
    with pytest.raises(InvalidInput):
        losses.dice_loss(np.zeros((2, 2)), np.full((2, 2), 0.5))
    with pytest.raises(InvalidInput):
        losses.dice_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_dice_gradient_matches_numeric():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, (5, 6))
    g = (rng.random((5, 6)) > 0.6).astype(np.uint8)
    _, grad = losses.dice_loss_and_grad(p, g)
    np.testing.assert_allclose(grad, numeric_grad(lambda x: losses.dice_loss(x, g), p), rtol=1e-6, atol=1e-9)


def test_consistency_examples():
    s, t = np.ones((4, 4)), np.zeros((4, 4))
    assert losses.consistency_loss(s, t, "sum") == 16.0
    assert losses.consistency_loss(s, t, "mean") == 1.0
    assert losses.consistency_loss(s, s) == 0.0
    with pytest.raises(InvalidConfig):
        losses.consistency_loss(s, t, "max")


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_consistency_gradient_matches_numeric(reduction):
    rng = np.random.default_rng(1)
    a, b = rng.random((4, 5)), rng.random((4, 5))
    _, grad = losses.consistency_loss_and_grad(a, b, reduction)
    num = numeric_grad(lambda x: losses.consistency_loss(x, b, reduction), a)
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-9)


def test_entropy_examples():
    assert losses.entropy_loss(np.full((3, 3), 0.5)) == pytest.approx(math.log(2), abs=1e-12)
    assert losses.entropy_loss(np.full((3, 3), 0.5)) == pytest.approx(0.693147, abs=1e-6)
    assert losses.entropy_loss(np.full((2, 2), 0.25)) == pytest.approx(0.562335, abs=1e-6)
    assert losses.entropy_loss(np.full((2, 2), 0.25), "positive_only") == pytest.approx(
        -0.25 * math.log(0.25), abs=1e-12
    )
    with pytest.raises(InvalidConfig):
        losses.entropy_loss(np.full((2, 2), 0.25), "renyi")


def test_entropy_is_finite_at_saturation():
    p = np.array([[0.0, 1.0], [0.0, 1.0]])
    value, grad = losses.entropy_loss_and_grad(p)
    assert math.isfinite(value) and 0 <= value < 1e-5
    assert not grad.any()


@pytest.mark.parametrize("form", ["binary_full", "positive_only"])
def test_entropy_gradient_matches_numeric(form):
    p = np.random.default_rng(2).uniform(0.02, 0.98, (4, 4))
    _, grad = losses.entropy_loss_and_grad(p, form)
    num = numeric_grad(lambda x: losses.entropy_loss(x, form), p)
    np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-9)


@settings(max_examples=50)
@given(st.floats(0, 1))
def test_entropy_bounded_by_log2(p):
    v = losses.entropy_loss(np.full((2, 2), p))
    assert 0 <= v <= math.log(2) + 1e-12


def test_lambda_examples():
    assert losses.lambda_schedule(0.0) == 1.5 * math.exp(-5.0)
    assert round(losses.lambda_schedule(0.0), 7) == 0.0101069
    assert losses.lambda_schedule(0.5) == 1.5 * math.exp(-1.25)
    assert round(losses.lambda_schedule(0.5), 7) == 0.4297572
    assert losses.lambda_schedule(1.0) == 1.5
    with pytest.raises(InvalidConfig):
        losses.lambda_schedule(1.2)


@given(st.floats(0, 1), st.floats(0, 1))
def test_lambda_monotone(a, b):
    lo, hi = sorted((a, b))
    assert losses.lambda_schedule(lo) <= losses.lambda_schedule(hi)
