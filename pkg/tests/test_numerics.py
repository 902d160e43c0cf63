from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hnlpu import numerics as nm


def e2m1(code):
    """Independent oracle: decode the 4 bits as sign | 2-bit exponent | 1-bit mantissa, bias 1."""
    s, e, m = code >> 3, (code >> 1) & 3, code & 1
    mag = Fraction(m, 2) if e == 0 else Fraction(2) ** (e - 1) * (1 + Fraction(m, 2))
    return -mag if s else mag


def test_codebook_matches_bit_layout():
    for c in range(16):
        assert nm.decode(c) == e2m1(c)
        assert nm.SCALED_INT[c] == 2 * e2m1(c)


def test_codebook_pinned_values():
    assert [float(v) for v in nm.FP4_VALUES[:8]] == [0, .5, 1, 1.5, 2, 3, 4, 6]
    assert list(nm.SCALED_INT) == [0, 1, 2, 3, 4, 6, 8, 12, 0, -1, -2, -3, -4, -6, -8, -12]


def test_negative_zero_canonical():
    assert nm.FP4Code(8).value == 0
    assert nm.FP4Code(8).canonical == 0
    assert list(nm.canonical_codes([8, 0, 9])) == [0, 0, 9]


def test_code_range_checked():
    with pytest.raises(ValueError):
        nm.FP4Code(16)


@pytest.mark.parametrize("x,code", [
    (0.25, 0), (0.75, 1), (1.25, 2), (1.75, 3), (2.5, 4), (3.5, 5), (5.0, 6),
    (-0.25, 0), (-2.5, 12), (100.0, 7), (-100.0, 15), (-0.0, 0), (0.3, 1),
])
def test_encode_ties_to_smaller_magnitude(x, code):
    assert nm.fp4_encode(x).code == code


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_encode_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        nm.fp4_encode(bad)


@given(st.integers(0, 15))
def test_encode_decode_roundtrip(c):
    assert nm.fp4_encode(float(nm.decode(c))).canonical == nm.FP4Code(c).canonical


@given(st.floats(-10, 10, allow_nan=False))
def test_encode_is_nearest(x):
    v = float(nm.decode(nm.fp4_encode(x)))
    clipped = max(-6.0, min(6.0, x))
    assert abs(v - clipped) == pytest.approx(min(abs(float(u) - clipped) for u in nm.FP4_VALUES))


def test_round_half_away():
    y = nm.round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.49]))
    assert list(y) == [1, 2, 3, -1, -2, 0]


def test_quantize_saturates_and_validates():
    q = nm.quantize_activations([1000.0, -1000.0, 0.26], 4, 0.5)
    assert list(q.values) == [7, -8, 1]
    with pytest.raises(ValueError):
        nm.quantize_activations([1.0], 1, 1.0)
    with pytest.raises(ValueError):
        nm.quantize_activations([1.0], 4, 0.0)
    with pytest.raises(ValueError):
        nm.IntActivationVector(np.array([8]), 4, 1.0)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=64), st.integers(2, 12))
def test_pow2_scale_fits_and_is_power_of_two(xs, bits):
    s = nm.pow2_scale(xs, bits)
    assert np.log2(s) == int(np.log2(s))
    lo, hi = nm.int_range(bits)
    assert max(abs(x) for x in xs) <= hi * s
    q = nm.quantize_pow2(xs, bits)
    assert np.all(np.abs(q.dequantize() - np.asarray(xs)) <= s / 2 + 1e-12)


@given(st.integers(1, 12).flatmap(
    lambda b: st.tuples(st.just(b), st.lists(st.integers(*nm.int_range(b)), min_size=1, max_size=50))))
def test_bit_planes_reconstruct(args):
    bits, vals = args
    v = nm.IntActivationVector(np.array(vals), bits, 1.0)
    planes = nm.bit_planes(v)
    assert [p.index for p in planes] == list(range(bits))
    assert planes[-1].weight == -(1 << (bits - 1)) or bits == 1
    assert list(nm.reconstruct(planes)) == vals
    assert (nm.plane_matrix(v) == np.stack([p.bits for p in planes])).all()


def test_plane_weights_pinned():
    assert [nm.plane_weight(t, 4) for t in range(4)] == [1, 2, 4, -8]


def test_dequantize_weights():
    assert list(nm.dequantize_weights([7, 15, 1], 0.5)) == [3.0, -3.0, 0.25]
