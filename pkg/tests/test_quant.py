import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stq import tensor as T
from stq.quant import (
    CodecError,
    DegenerateLayerError,
    QuantDepth,
    bwn_scale,
    pack_codes,
    packed_nbytes,
    sign_binarize,
    ste_quantize,
    threshold_ternarize,
    twn_threshold_and_scale,
    unpack_codes,
)
from stq.tensor import Tensor, backward

finite = st.floats(-5, 5, allow_nan=False, width=32)


def test_sign_binarize_zero_goes_positive():
    np.testing.assert_array_equal(sign_binarize(np.array([0.3, -0.2, 0.0])), [1, -1, 1])
    np.testing.assert_array_equal(sign_binarize(-np.arange(1, 5.0)), [-1] * 4)


@given(arrays(np.float64, 20, elements=finite.filter(lambda v: v != 0)))
def test_sign_binarize_is_odd_off_zero(w):
    np.testing.assert_array_equal(sign_binarize(-w), -sign_binarize(w))


def test_threshold_ternarize_examples():
    np.testing.assert_array_equal(threshold_ternarize(np.array([0.5, 0.1, -0.5]), 0.2), [1, 0, -1])
    np.testing.assert_array_equal(threshold_ternarize(np.array([0.5, -0.3]), 1.0), [0, 0])
    # boundary belongs to the zero bin
    np.testing.assert_array_equal(threshold_ternarize(np.array([0.2, -0.2]), 0.2), [0, 0])
    with pytest.raises(ValueError):
        threshold_ternarize(np.ones(2), 0.0)


@given(arrays(np.float64, 30, elements=finite), st.floats(1e-3, 3))
def test_threshold_ternarize_is_odd(w, delta):
    np.testing.assert_array_equal(threshold_ternarize(-w, delta), -threshold_ternarize(w, delta))


@given(arrays(np.float64, 30, elements=finite.filter(lambda v: abs(v) > 1e-6)))
def test_tiny_threshold_matches_sign(w):
    np.testing.assert_array_equal(threshold_ternarize(w, 1e-9), sign_binarize(w))


def _ste(w0, mu0, delta, upstream):
    w = Tensor(np.array([w0]), requires_grad=True)
    mu = Tensor(np.array([mu0]), requires_grad=True)
    out = ste_quantize(w, lambda x: threshold_ternarize(x, delta), mu)
    g = backward(T.sum_(out * upstream), leaves=[w, mu])
    return out.data[0], g[w][0], g[mu][0]


def test_ste_quantize_hand_chain_rule():
    assert _ste(0.5, 2.0, 0.2, 1.0) == (2.0, 2.0, 1.0)


def test_ste_quantize_clips_outside_unit_interval():
    _, gw, _ = _ste(1.5, 2.0, 0.2, 3.7)
    assert gw == 0.0


def test_ste_quantize_zero_code_kills_scale_gradient():
    out, _, gmu = _ste(0.1, 1.0, 0.2, 1.0)
    assert out == 0.0 and gmu == 0.0


def test_ste_quantize_per_filter_scale_gradient():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(scale=0.5, size=(3, 2, 2)), requires_grad=True)
    mu = Tensor(np.array([0.5, 1.0, 2.0]), requires_grad=True)
    up = rng.normal(size=(3, 2, 2))
    out = ste_quantize(w, lambda x: threshold_ternarize(x, 0.1), mu)
    codes = threshold_ternarize(w.data, 0.1)
    np.testing.assert_array_equal(out.data, mu.data[:, None, None] * codes)
    g = backward(T.sum_(out * up), leaves=[w, mu])
    np.testing.assert_allclose(g[mu], (up * codes).reshape(3, -1).sum(axis=1))
    np.testing.assert_allclose(g[w], up * mu.data[:, None, None] * (np.abs(w.data) <= 1))


def test_ste_quantize_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        ste_quantize(Tensor(np.ones(2)), sign_binarize, np.array([0.0]))


@settings(max_examples=50)
@given(arrays(np.float64, 16, elements=st.floats(-3, 3)), st.floats(0.1, 4), st.floats(-3, 3))
def test_ste_mask_property(w0, mu0, upstream):
    w = Tensor(w0, requires_grad=True)
    out = ste_quantize(w, sign_binarize, np.array([mu0]))
    g = backward(T.sum_(out * upstream), leaves=[w])[w]
    outside = np.abs(w0) > 1
    assert np.all(g[outside] == 0)
    np.testing.assert_allclose(g[~outside], mu0 * upstream)


def test_bwn_scale():
    assert bwn_scale(np.array([1, -1, 1, -1.0])) == 1.0
    assert bwn_scale(np.array([2, 0, -2, 0.0])) == 1.0
    with pytest.raises(ValueError):
        bwn_scale(np.array([]))


def test_bwn_scale_half_normal_mean():
    w = np.random.default_rng(0).normal(size=10**6)
    assert abs(bwn_scale(w) - math.sqrt(2 / math.pi)) < 0.01


def test_twn_threshold_and_scale():
    delta, mu = twn_threshold_and_scale(np.array([1, 1, -1, -1.0]))
    assert delta == pytest.approx(0.7) and mu == 1.0
    with pytest.raises(DegenerateLayerError):
        twn_threshold_and_scale(np.zeros(4))


@given(arrays(np.float64, 40, elements=st.floats(-3, 3)).filter(lambda a: np.abs(a).max() > 1e-3), st.floats(0.1, 10))
def test_twn_positive_homogeneity(w, c):
    d1, m1 = twn_threshold_and_scale(w)
    d2, m2 = twn_threshold_and_scale(c * w)
    assert d2 == pytest.approx(c * d1, rel=1e-9) and m2 == pytest.approx(c * m1, rel=1e-9)


def test_twn_gaussian_monte_carlo():
    w = np.random.default_rng(1).normal(size=10**6)
    delta, mu = twn_threshold_and_scale(w)
    d_exact = 0.7 * math.sqrt(2 / math.pi)
    assert abs(delta - d_exact) < 0.005
    # survivors: P(|z| > d) = 1 - erf(d / sqrt 2) ~= 0.576
    survive = np.mean(np.abs(w) > delta)
    assert abs(survive - (1 - math.erf(d_exact / math.sqrt(2)))) < 0.005
    # mean of |z| given |z| > d for a standard normal: 2 phi(d) / P(|z| > d)
    phi = math.exp(-d_exact**2 / 2) / math.sqrt(2 * math.pi)
    assert abs(mu - 2 * phi / (1 - math.erf(d_exact / math.sqrt(2)))) < 0.01


def test_pack_binary_hand_encoding():
    assert pack_codes([1, -1, -1, 1, 1, 1, 1, 1], QuantDepth.BINARY) == b"\xf9"


def test_pack_ternary_hand_encoding():
    assert pack_codes([0, 1, -1, 0], QuantDepth.TERNARY) == b"\x24"


def test_pack_padding_and_size():
    assert pack_codes([1, 1, 1], QuantDepth.BINARY) == b"\x07"
    assert pack_codes([1, -1, 0, 1, 1], QuantDepth.TERNARY) == bytes([0b01001001, 0b00000001])
    for n in range(1, 40):
        assert len(pack_codes(np.ones(n, dtype=np.int8), QuantDepth.TERNARY)) * 8 - 2 * n < 8
        assert packed_nbytes(n, QuantDepth.BINARY) * 8 - n < 8


def test_pack_errors():
    with pytest.raises(CodecError):
        pack_codes([1, 0, -1], QuantDepth.BINARY)
    with pytest.raises(CodecError, match="reserved"):
        unpack_codes(b"\x0c", QuantDepth.TERNARY, 2)
    with pytest.raises(CodecError):
        unpack_codes(b"\x00\x00", QuantDepth.BINARY, 3)


def test_pack_round_trip_many():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        t = rng.integers(-1, 2, size=n).astype(np.int8)
        np.testing.assert_array_equal(unpack_codes(pack_codes(t, QuantDepth.TERNARY), QuantDepth.TERNARY, n), t)
        b = np.where(rng.random(n) < 0.5, -1, 1).astype(np.int8)
        np.testing.assert_array_equal(unpack_codes(pack_codes(b, QuantDepth.BINARY), QuantDepth.BINARY, n), b)
