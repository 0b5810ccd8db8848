import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgftseg.elastic import DisplacementField, ElasticParams, make_displacement, warp
from cgftseg.errors import InvalidConfig, InvalidInput


def test_zero_magnitude_gives_zero_field():
    f = make_displacement(16, 16, ElasticParams(4.0, 0.0, seed=3))
    assert not f.dx.any() and not f.dy.any()


def test_field_is_deterministic():
    p = ElasticParams(4.0, 2.0, seed=11)
    a, b = make_displacement(16, 24, p), make_displacement(16, 24, p)
    assert a.dx.tobytes() == b.dx.tobytes() and a.dy.tobytes() == b.dy.tobytes()


def test_rescale_hits_magnitude_exactly():
    f = make_displacement(16, 16, ElasticParams(4.0, 2.0, seed=7))
    assert max(np.abs(f.dx).max(), np.abs(f.dy).max()) == 2.0


def test_magnitude_limit_enforced():
    with pytest.raises(InvalidConfig):
        make_displacement(16, 16, ElasticParams(4.0, 4.0))
    with pytest.raises(InvalidConfig):
        ElasticParams(0.0, 1.0)


def test_zero_field_is_identity():
    img = np.random.default_rng(0).random((12, 10))
    zero = DisplacementField.zeros(12, 10)
    assert warp(img, zero, "nearest").tobytes() == img.tobytes()
    assert np.abs(warp(img, zero, "bilinear") - img).max() <= 1e-12


def test_constant_image_unchanged():
    f = make_displacement(16, 16, ElasticParams(3.0, 3.0, seed=2))
    out = warp(np.full((16, 16), 0.37), f)
    np.testing.assert_allclose(out, 0.37, atol=1e-15)


def test_unit_shift_reads_right_neighbour():
    ramp = np.arange(16, dtype=float).reshape(4, 4)
    field = DisplacementField(np.ones((4, 4)), np.zeros((4, 4)))
    expected = np.array([[1, 2, 3, 3], [5, 6, 7, 7], [9, 10, 11, 11], [13, 14, 15, 15]], float)
    np.testing.assert_allclose(warp(ramp, field), expected, atol=1e-12)
    np.testing.assert_array_equal(warp(ramp, field, "nearest"), expected)


def test_shape_mismatch():
    with pytest.raises(InvalidInput):
        warp(np.zeros((8, 8)), DisplacementField.zeros(8, 6))


def test_nearest_keeps_masks_binary():
    mask = (np.random.default_rng(1).random((32, 32)) > 0.7).astype(float)
    f = make_displacement(32, 32, ElasticParams(4.0, 3.0, seed=5))
    assert set(np.unique(warp(mask, f, "nearest"))) <= {0.0, 1.0}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.5, 6.0), st.floats(0.0, 3.9), st.floats(-3, 3), st.floats(-2, 2))
def test_bilinear_range_and_affine_commutation(seed, sigma, mag, a, b):
    rng = np.random.default_rng(seed)
    prob = rng.random((16, 16))
    f = make_displacement(16, 16, ElasticParams(sigma, mag, seed))
    out = warp(prob, f)
    assert out.min() >= prob.min() and out.max() <= prob.max()
    assert np.abs(warp(a * prob + b, f) - (a * out + b)).max() < 1e-9
