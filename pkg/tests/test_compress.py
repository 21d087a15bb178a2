import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fs3d.compress import (FP16_MAX, CompressionError, QuantizedBlock, dequantize, error_bound,
                           quantize_by_type, roundtrip)


def within_bound(x, types):
    blk = quantize_by_type(x, types)
    err = np.abs(dequantize(blk) - x.astype(np.float64))
    return np.all(err <= error_bound(x, types, blk))


def test_all_zero_exact():
    x = np.zeros((5, 3), np.float32)
    blk = quantize_by_type(x, [1, 1, 2, 2, 2])
    assert blk.scales.tolist() == [1.0, 1.0]
    assert np.all(blk.body == 0)
    assert np.array_equal(dequantize(blk, np.float32), x)


def test_unit_scale_at_fp16_max():
    grid = np.array([[FP16_MAX, -1.5, 0.25, 2048.0]], np.float32)
    blk = quantize_by_type(grid, [7])
    assert blk.scales[0] == 1.0
    assert np.array_equal(dequantize(blk, np.float32), grid)


def test_grid_values_roundtrip_exact():
    rng = np.random.default_rng(0)
    s = np.float32(0.5)
    body = rng.uniform(-FP16_MAX, FP16_MAX, (20, 4)).astype(np.float16)
    body[0, 0] = FP16_MAX
    x = (body.astype(np.float64) * s).astype(np.float32)
    assert np.array_equal(roundtrip(x, np.zeros(20, int)), x)


def test_two_types_independent_scales():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (50, 8))
    a[0, 0] = 1.0
    a[1] = rng.uniform(1e-7, 2e-7, 8)  # subnormal in binary16 under a shared scale
    b = rng.uniform(-1000, 1000, (50, 8))
    b[0, 0] = 1000.0
    x = np.concatenate([a, b]).astype(np.float32)
    types = np.r_[np.zeros(50, int), np.ones(50, int)]
    blk = quantize_by_type(x, types)
    assert blk.scales.tolist() == [np.float32(1.0 / FP16_MAX), np.float32(1000.0 / FP16_MAX)]
    err = np.abs(dequantize(blk)[:50] - x[:50])
    alone = np.abs(dequantize(quantize_by_type(x[:50], types[:50])) - x[:50])
    assert np.array_equal(err, alone)
    # per-tensor baseline: one scale from the global amax
    s = np.float32(1000.0 / FP16_MAX)
    base = np.abs((x[:50] / np.float64(s)).astype(np.float16).astype(np.float64) * s - x[:50])
    rel, rel_base = err[1] / x[1], base[1] / x[1]
    assert rel.max() <= 2.0 ** -11 < rel_base.max()
    assert rel_base.max() > 8 * rel.max()


def test_uniform_relative_error():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (1000, 64)).astype(np.float32)
    got = roundtrip(x, np.zeros(1000, int)).astype(np.float64)
    amax = np.abs(x).max()
    m = np.abs(x) >= amax * 2.0 ** -10
    rel = np.abs(got[m] - x[m]) / np.abs(x[m])
    assert rel.max() <= 2.0 ** -10


def test_bytes_halved():
    x = np.ones((37, 16), np.float32)
    blk = quantize_by_type(x, np.arange(37) % 3)
    assert blk.payload_bytes * 2 == x.nbytes
    assert blk.scale_bytes == 3 * 4


def test_non_finite_rejected():
    with pytest.raises(CompressionError):
        quantize_by_type(np.array([[np.inf, 0.0]]), [0])
    with pytest.raises(CompressionError):
        quantize_by_type(np.zeros((2, 2)), [0])


def test_wire_layout_by_hand():
    x = np.array([[2.0, -1.0], [0.0, 0.0], [4.0, 1.0]], np.float32)
    types = [5, 3, 5]
    blk = quantize_by_type(x, types)
    s5 = np.float32(4.0 / FP16_MAX)
    ref = b"FQ16" + struct.pack("<III", 3, 2, 2)
    ref += struct.pack("<ii", 3, 5) + struct.pack("<ff", 1.0, s5)
    ref += struct.pack("<III", 0, 1, 3)
    body = np.array([[0, 0], [2.0 / s5, -1.0 / s5], [4.0 / s5, 1.0 / s5]])
    ref += np.clip(body, -FP16_MAX, FP16_MAX).astype("<f2").tobytes()
    ref += struct.pack("<III", 1, 0, 2)
    assert blk.to_bytes() == ref
    back = QuantizedBlock.from_bytes(ref)
    assert np.array_equal(dequantize(back), dequantize(blk))


def test_bad_magic():
    with pytest.raises(CompressionError):
        QuantizedBlock.from_bytes(b"XXXX" + bytes(12))


def test_million_values_bound():
    rng = np.random.default_rng(3)
    mag = 10.0 ** rng.uniform(-8, 4, (62500, 16))
    x = (mag * rng.choice([-1, 1], mag.shape)).astype(np.float32)
    assert within_bound(x, rng.integers(0, 6, 62500))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.floats(1e-30, 1e30), st.integers(0, 2 ** 31 - 1))
def test_bound_property(n, w, amax, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, w)) * amax
    # adversarial: some entries pinned at or next to the type maximum
    x.reshape(-1)[: max(1, x.size // 4)] = np.float32(amax) * rng.choice([-1, 1])
    x = x.astype(np.float32)
    types = rng.integers(0, 3, n)
    assert within_bound(x, types)
    blk = quantize_by_type(x, types)
    assert np.all(np.isfinite(blk.body.astype(np.float64)))
    assert np.all(np.abs(blk.body.astype(np.float64)) <= FP16_MAX)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2 ** 31 - 1))
def test_idempotent_and_permutation(n, seed):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((n, 4)) * 10.0 ** rng.uniform(-3, 3)).astype(np.float32)
    types = rng.integers(0, 4, n)
    b1 = quantize_by_type(x, types)
    b2 = quantize_by_type(dequantize(b1, np.float32), types)
    assert np.array_equal(b1.to_bytes(), b2.to_bytes())
    assert np.array_equal(types[b1.perm], np.sort(types, kind="stable"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_type_isolation(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((6, 3)).astype(np.float32)
    b1 = rng.standard_normal((4, 3)).astype(np.float32)
    b2 = (rng.standard_normal((4, 3)) * 1e5).astype(np.float32)
    t = np.r_[np.zeros(6, int), np.ones(4, int)]
    r1 = roundtrip(np.concatenate([a, b1]), t)[:6]
    r2 = roundtrip(np.concatenate([a, b2]), t)[:6]
    assert np.array_equal(r1, r2)
