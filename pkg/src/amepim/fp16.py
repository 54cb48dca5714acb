"""IEEE 754 binary16 arithmetic with round-to-nearest-even.

Two paths are provided:

* scalar ``Half`` values whose rounding is done here with integer arithmetic,
* vectorised operations on ``uint16`` bit arrays (lanes on the last axis),
  used by the device model.

Both compute the exact result in float64 before a single rounding.  Sums and
products of two binary16 values are always exact in float64 (at most 40
significant bits), so each operation is correctly rounded.  Any NaN result is
replaced by the quiet NaN ``0x7E00``.  Subnormals are kept; there is no
flush-to-zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

LANES = 16
CANONICAL_NAN = 0x7E00
POS_INF = 0x7C00
NEG_ONE = 0xBC00
NEG_ZERO = 0x8000
ONE = 0x3C00

_EMIN = -14
_EMAX = 15
_MANT_BITS = 10


def _round_ratio(num: int, den: int) -> int:
    """Round the rational ``num/den`` (den > 0) to binary16 bits."""
    sign = 0x8000 if num < 0 else 0
    num = abs(num)
    if num == 0:
        return sign
    # 2**e <= num/den < 2**(e+1)
    e = num.bit_length() - den.bit_length()
    if e >= 0:
        if num < (den << e):
            e -= 1
    elif (num << -e) < den:
        e -= 1
    exp = max(e, _EMIN)
    qe = exp - _MANT_BITS
    if qe <= 0:
        n, d = num << -qe, den
    else:
        n, d = num, den << qe
    q, r = divmod(n, d)
    if 2 * r > d or (2 * r == d and q & 1):
        q += 1
    if q < (1 << _MANT_BITS):
        return sign | q
    if q == (1 << (_MANT_BITS + 1)):
        q >>= 1
        exp += 1
    if exp > _EMAX:
        return sign | POS_INF
    return sign | ((exp + 15) << _MANT_BITS) | (q - (1 << _MANT_BITS))


def round_to_half_bits(x: float) -> int:
    """Round a Python float (binary64) to the nearest binary16 bit pattern."""
    if math.isnan(x):
        return CANONICAL_NAN
    if math.isinf(x):
        return POS_INF | (0x8000 if x < 0 else 0)
    if x == 0.0:
        return 0x8000 if math.copysign(1.0, x) < 0 else 0
    num, den = x.as_integer_ratio()
    return _round_ratio(num, den)


def half_bits_to_float(bits: int) -> float:
    sign = -1.0 if bits & 0x8000 else 1.0
    exp = (bits >> 10) & 0x1F
    mant = bits & 0x3FF
    if exp == 0:
        return sign * math.ldexp(mant, -24)
    if exp == 0x1F:
        return sign * math.inf if mant == 0 else math.nan
    return sign * math.ldexp(mant | 0x400, exp - 25)


@dataclass(frozen=True)
class Half:
    """A binary16 value held as its 16-bit pattern."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"not a 16-bit pattern: {self.bits:#x}")

    @classmethod
    def from_float(cls, x: float) -> "Half":
        return cls(round_to_half_bits(float(x)))

    def __float__(self) -> float:
        return half_bits_to_float(self.bits)

    def is_nan(self) -> bool:
        return (self.bits & 0x7C00) == 0x7C00 and (self.bits & 0x3FF) != 0

    def is_finite(self) -> bool:
        return (self.bits & 0x7C00) != 0x7C00

    def __add__(self, other: "Half") -> "Half":
        return add(self, other)

    def __mul__(self, other: "Half") -> "Half":
        return mul(self, other)

    def __neg__(self) -> "Half":
        return negate(self)

    def __repr__(self) -> str:
        return f"Half({float(self)!r}, bits={self.bits:#06x})"


def f32_bits_to_f16(bits: int) -> Half:
    """Convert a binary32 bit pattern to binary16 (NaN payload kept)."""
    sign = (bits >> 16) & 0x8000
    if (bits & 0x7F800000) == 0x7F800000 and bits & 0x007FFFFF:
        payload = (bits >> 13) & 0x3FF
        return Half(sign | 0x7C00 | (payload or 0x200))
    x = struct.unpack("<f", struct.pack("<I", bits & 0xFFFFFFFF))[0]
    return Half(round_to_half_bits(x))


def f16_to_f32_bits(h: Half) -> int:
    """Exact widening of a binary16 value to a binary32 bit pattern."""
    sign = (h.bits & 0x8000) << 16
    exp = (h.bits >> 10) & 0x1F
    mant = h.bits & 0x3FF
    if exp == 0x1F:
        return sign | 0x7F800000 | (mant << 13)
    return sign | struct.unpack("<I", struct.pack("<f", abs(half_bits_to_float(h.bits))))[0]


def f32_to_f16(x: float) -> Half:
    """Convert a value, first narrowed to binary32, to binary16."""
    return f32_bits_to_f16(struct.unpack("<I", struct.pack("<f", x))[0])


def f16_to_f32(h: Half) -> float:
    return half_bits_to_float(h.bits)


def add(a: Half, b: Half) -> Half:
    return Half(round_to_half_bits(float(a) + float(b)))


def mul(a: Half, b: Half) -> Half:
    return Half(round_to_half_bits(float(a) * float(b)))


def negate(a: Half) -> Half:
    if a.is_nan():
        return Half(CANONICAL_NAN)
    return Half(a.bits ^ 0x8000)


def mac(acc: Half, a: Half, b: Half, fused: bool = False) -> Half:
    """``acc + a*b``.

    The default rounds the product before the addition, as a lane with a
    separate multiplier and adder would.  ``fused=True`` rounds once.
    """
    if not fused:
        return add(mul(a, b), acc)
    vals = [float(acc), float(a), float(b)]
    if any(math.isnan(v) or math.isinf(v) for v in vals):
        # the non-finite cases round identically in both modes
        return Half(round_to_half_bits(vals[0] + vals[1] * vals[2]))
    exact = Fraction(vals[0]) + Fraction(vals[1]) * Fraction(vals[2])
    return Half(_round_ratio(exact.numerator, exact.denominator))


# --- vector path -----------------------------------------------------------

def to_bits(values) -> np.ndarray:
    """float16-convertible data -> uint16 bit array (NaNs canonicalised)."""
    arr = np.asarray(values)
    if arr.dtype == np.uint16:
        return arr
    out = arr.astype(np.float16).view(np.uint16)
    return _canon(out, np.isnan(arr.astype(np.float64)))


def from_bits(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint16).view(np.float16)


def _f64(bits: np.ndarray) -> np.ndarray:
    return bits.view(np.float16).astype(np.float64)


def _canon(out: np.ndarray, nan_mask: np.ndarray) -> np.ndarray:
    if nan_mask.any():
        out = out.copy()
        out[nan_mask] = CANONICAL_NAN
    return out


def _round(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        return _canon(x.astype(np.float16).view(np.uint16), np.isnan(x))


def vec_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return _round(_f64(a) + _f64(b))


def vec_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return _round(_f64(a) * _f64(b))


def vec_mac(acc: np.ndarray, a: np.ndarray, b: np.ndarray, fused: bool = False) -> np.ndarray:
    if not fused:
        return vec_add(vec_mul(a, b), acc)
    acc, a, b = np.broadcast_arrays(acc, a, b)
    out = np.empty(acc.shape, dtype=np.uint16)
    for idx in np.ndindex(acc.shape):
        out[idx] = mac(Half(int(acc[idx])), Half(int(a[idx])), Half(int(b[idx])), fused=True).bits
    return out


def vec_op(op: str, dst: np.ndarray, a: np.ndarray, b: np.ndarray, fused: bool = False) -> np.ndarray:
    """Lane-wise ADD/MUL/MAC/MAD on bit arrays; ``dst`` is the addend for MAC/MAD."""
    if op == "add":
        return vec_add(a, b)
    if op == "mul":
        return vec_mul(a, b)
    if op in ("mac", "mad"):
        return vec_mac(dst, a, b, fused=fused)
    raise ValueError(f"unknown vector op {op!r}")
