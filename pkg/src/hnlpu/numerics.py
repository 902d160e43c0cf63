"""FP4 (E2M1) weight codebook, fixed-point activations and LSB-first bit planes.

Weights are carried as ``scaled_int = 2 * value`` so that every hardwired
product is an exact integer; dequantization applies ``scale / 2`` once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

# E2M1 magnitudes for codes 0..7; codes 8..15 are the negated set (8 is -0).
_MAGNITUDES = (Fraction(0), Fraction(1, 2), Fraction(1), Fraction(3, 2),
               Fraction(2), Fraction(3), Fraction(4), Fraction(6))

FP4_VALUES: tuple[Fraction, ...] = _MAGNITUDES + tuple(-m for m in _MAGNITUDES)
SCALED_INT = np.array([int(2 * v) for v in FP4_VALUES], dtype=np.int64)
FP4_FLOAT = SCALED_INT.astype(np.float64) / 2.0
_POS_MAG = np.array([float(m) for m in _MAGNITUDES])

ZERO_CODE = 0
NEG_ZERO_CODE = 8
FP4_MAX = 6.0


@dataclass(frozen=True)
class FP4Code:
    code: int

    def __post_init__(self):
        if not 0 <= self.code <= 15:
            raise ValueError(f"FP4 code out of range: {self.code}")

    @property
    def value(self) -> Fraction:
        return FP4_VALUES[self.code]

    @property
    def scaled_int(self) -> int:
        return int(SCALED_INT[self.code])

    @property
    def canonical(self) -> int:
        """Code with -0 folded onto +0."""
        return ZERO_CODE if self.code == NEG_ZERO_CODE else self.code


def decode(code: int | FP4Code) -> Fraction:
    c = code.code if isinstance(code, FP4Code) else int(code)
    return FP4_VALUES[c]


def fp4_encode(x: float) -> FP4Code:
    """Nearest codebook value, ties toward the smaller magnitude, saturating at +-6."""
    if not math.isfinite(x):
        raise ValueError("fp4_encode needs a finite input")
    return FP4Code(int(fp4_encode_array(np.array([x]))[0]))


def fp4_encode_array(xs) -> np.ndarray:
    """Vectorized :func:`fp4_encode`; returns uint8 codes."""
    xs = np.asarray(xs, dtype=np.float64)
    mag = np.minimum(np.abs(xs), FP4_MAX)
    # argmin returns the first minimum, i.e. the smaller magnitude on ties
    idx = np.abs(mag[..., None] - _POS_MAG).argmin(axis=-1)
    neg = (xs < 0) & (idx > 0)
    return np.where(neg, idx + 8, idx).astype(np.uint8)


def canonical_codes(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    return np.where(codes == NEG_ZERO_CODE, ZERO_CODE, codes).astype(np.uint8)


def dequantize_weights(codes, scale: float) -> np.ndarray:
    return FP4_FLOAT[np.asarray(codes, dtype=np.intp)] * scale


@dataclass(frozen=True)
class IntActivationVector:
    values: np.ndarray
    bit_width: int
    scale: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int64)
        object.__setattr__(self, "values", vals)
        if self.bit_width < 1:
            raise ValueError("bit_width must be positive")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        lo, hi = int_range(self.bit_width)
        if vals.size and (vals.min() < lo or vals.max() > hi):
            raise ValueError(f"values exceed {self.bit_width}-bit two's-complement range")

    def __len__(self):
        return len(self.values)

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def int_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def round_half_away(y: np.ndarray) -> np.ndarray:
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def quantize_activations(xs: Sequence[float], bits: int, scale: float) -> IntActivationVector:
    if bits < 2:
        raise ValueError("activation bit width must be >= 2")
    if not scale > 0:
        raise ValueError("activation scale must be > 0")
    lo, hi = int_range(bits)
    y = round_half_away(np.asarray(xs, dtype=np.float64) / scale)
    return IntActivationVector(np.clip(y, lo, hi).astype(np.int64), bits, float(scale))


def pow2_scale(xs, bits: int) -> float:
    """Smallest power-of-two scale that fits max|x| in the positive range.

    Power-of-two scales keep dequantized products exactly representable in
    float64, so an integer and a float evaluation of the same matmul agree
    bit for bit.
    """
    m = float(np.max(np.abs(xs))) if np.size(xs) else 0.0
    if m == 0.0 or not math.isfinite(m):
        return 1.0
    hi = (1 << (bits - 1)) - 1
    return 2.0 ** math.ceil(math.log2(m / hi))


def quantize_pow2(xs, bits: int) -> IntActivationVector:
    return quantize_activations(xs, bits, pow2_scale(xs, bits))


@dataclass(frozen=True)
class BitPlane:
    index: int
    bits: np.ndarray
    weight: int


def plane_weight(t: int, bits: int) -> int:
    return -(1 << t) if t == bits - 1 else 1 << t


def bit_planes(v: IntActivationVector) -> list[BitPlane]:
    """Two's-complement bit planes, LSB first; the MSB plane is weighted negatively."""
    B = v.bit_width
    u = v.values & ((1 << B) - 1)
    return [BitPlane(t, ((u >> t) & 1).astype(np.uint8), plane_weight(t, B)) for t in range(B)]


def plane_matrix(v: IntActivationVector) -> np.ndarray:
    """All planes stacked as a (B, n) uint8 array."""
    B = v.bit_width
    u = v.values & ((1 << B) - 1)
    return ((u[None, :] >> np.arange(B)[:, None]) & 1).astype(np.uint8)


def reconstruct(planes: Sequence[BitPlane]) -> np.ndarray:
    out = np.zeros(len(planes[0].bits), dtype=np.int64)
    for p in planes:
        out += p.weight * p.bits.astype(np.int64)
    return out
