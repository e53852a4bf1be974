import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpdmm.optimizer import pack_codes, unpack_codes
from qpdmm.quantizer import (
    EdgeCodec, QuantizerConfig, QuantizerError, cell_width, decode, encode_difference, quantize, reproduce,
)


def test_two_bit_example():
    # interior points of the four cells and their reproductions at delta = 1
    for v, expected in [(-7.0, -1.5), (-1.3, -1.5), (-0.6, -0.5), (0.4, 0.5), (0.99, 0.5), (1.2, 1.5), (50.0, 1.5)]:
        assert reproduce(quantize(v, 1.0, 2), 1.0, 2) == expected
    assert reproduce(np.arange(4), 1.0, 2).tolist() == [-1.5, -0.5, 0.5, 1.5]


def test_tie_rule_boundaries_go_up():
    assert reproduce(quantize(0.0, 1.0, 2), 1.0, 2) == 0.5
    assert reproduce(quantize(-1.0, 1.0, 2), 1.0, 2) == -0.5
    assert reproduce(quantize(1.0, 1.0, 2), 1.0, 2) == 1.5


def test_one_bit_sign():
    assert reproduce(quantize(0.3, 1.0, 1), 1.0, 1) == 0.5
    assert reproduce(quantize(-0.2, 1.0, 1), 1.0, 1) == -0.5
    assert reproduce(np.uint64(1), 0.81, 1) == pytest.approx(0.405, abs=1e-15)


def test_cell_width_schedule():
    cfg = QuantizerConfig(delta0=1.0, gamma=0.9)
    assert cell_width(cfg, 1) == 1.0
    assert cell_width(cfg, 3) == pytest.approx(0.81, abs=1e-15)
    for t in range(1, 50):
        assert cell_width(cfg, t + 1) / cell_width(cfg, t) == pytest.approx(0.9, rel=1e-12)
        assert cell_width(cfg, t + 1) < cell_width(cfg, t)
    with pytest.raises(QuantizerError):
        cell_width(cfg, 0)


def test_config_validation():
    for bad in (dict(l=0), dict(l=65), dict(delta0=0.0), dict(gamma=1.0), dict(gamma=0.0)):
        with pytest.raises(QuantizerError):
            QuantizerConfig(**bad)


def test_errors():
    with pytest.raises(QuantizerError):
        quantize(np.nan, 1.0, 2)
    with pytest.raises(QuantizerError):
        quantize(1.0, 0.0, 2)
    with pytest.raises(QuantizerError):
        reproduce(4, 1.0, 2)
    with pytest.raises(QuantizerError):
        reproduce(-1, 1.0, 2)
    with pytest.raises(QuantizerError):
        reproduce(0.5, 1.0, 2)


def test_zero_difference_encodes_as_positive_half_cell():
    enc = encode_difference(np.array([0.7]), np.array([0.7]), 1, QuantizerConfig(l=1, delta0=1.0))
    assert enc.v[0] == 0 and enc.v_hat[0] == 0.5 and enc.nq[0] == 0.5


def test_decode_summation():
    cfg = QuantizerConfig(l=2, delta0=1.0, gamma=0.5)
    # width 1 at t=1 reproduces 0.5 at index 2; width 0.5 at t=2 reproduces -0.25 at index 1
    z1 = decode(np.array([0.7]), np.array([2], dtype=np.uint64), 1, cfg)
    z2 = decode(z1, np.array([1], dtype=np.uint64), 2, cfg)
    assert z2[0] == pytest.approx(0.95, abs=1e-15)


def test_passthrough():
    cfg = QuantizerConfig(enabled=False)
    enc = encode_difference(np.array([1.25]), np.array([0.5]), 4, cfg)
    assert enc.code is None and enc.v_hat[0] == 0.75 and enc.nq[0] == 0
    assert cfg.bits_per_scalar == 64


def test_l64_roundtrip():
    delta = 1e-12
    v = np.array([-3.0, -1e-9, 0.0, 2.5e-7, 3.0])
    codes = quantize(v, delta, 64)
    assert codes.dtype == np.uint64
    assert np.all(np.abs(reproduce(codes, delta, 64) - v) <= delta / 2 + 1e-15 * np.abs(v))


@settings(max_examples=200, deadline=None)
@given(l=st.integers(1, 16), delta=st.floats(1e-6, 1e3), frac=st.floats(-0.999999, 0.999999))
def test_granular_bound(l, delta, frac):
    v = frac * 2 ** (l - 1) * delta
    idx = quantize(v, delta, l)
    assert 0 <= int(idx) < 2**l
    assert abs(reproduce(idx, delta, l) - v) <= delta / 2 * (1 + 1e-9)


@settings(max_examples=100, deadline=None)
@given(l=st.integers(1, 12), delta=st.floats(1e-4, 1e2), v=st.floats(-1e9, 1e9))
def test_index_always_in_range(l, delta, v):
    assert 0 <= int(quantize(v, delta, l)) <= 2**l - 1


@settings(max_examples=50, deadline=None)
@given(l=st.integers(1, 12), k=st.integers(0, 4095), delta=st.floats(1e-3, 1e3))
def test_reproduction_idempotent(l, k, delta):
    k = k % 2**l
    r = reproduce(k, delta, l)
    assert int(quantize(r, delta, l)) == k


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), l=st.integers(1, 8))
def test_codec_symmetry_and_telescoping(seed, l):
    gen = np.random.default_rng(seed)
    cfg = QuantizerConfig(l=l, delta0=1.0, gamma=0.9)
    z0 = gen.standard_normal(4)
    tx, rx = EdgeCodec(cfg, z0), EdgeCodec(cfg, z0)
    folded = z0.copy()
    for _ in range(40):
        enc = tx.encode(gen.standard_normal(4))
        folded = folded + enc.v_hat
        rx.decode(enc.code)
        assert np.array_equal(tx.zhat, rx.zhat)
        assert np.array_equal(rx.zhat, folded)


@settings(max_examples=50, deadline=None)
@given(l=st.integers(1, 64), data=st.data())
def test_pack_unpack_roundtrip(l, data):
    hi = 2**l - 1
    codes = data.draw(st.lists(st.integers(0, hi), min_size=1, max_size=40))
    arr = np.array(codes, dtype=np.uint64)
    blob = pack_codes(arr, l)
    assert len(blob) == -(-l * len(codes) // 8)
    assert np.array_equal(unpack_codes(blob, l, len(codes)), arr)
