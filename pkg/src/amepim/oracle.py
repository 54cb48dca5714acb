"""Host-side reference results for GEMM and element-wise operations.

``ORDERED_FP16`` accumulates ``C[:, n] = mac(C[:, n], A[:, k], B[k, n])`` for
ascending ``k``, rounding after every product and every add, which is the
order the MAC microkernel uses.  ``FLOAT64`` is a plain float64 GEMM used
for tolerance checks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import fp16
from .fp16 import Half


class OracleMode(enum.Enum):
    ORDERED_FP16 = "ordered"
    FLOAT64 = "float64"


@dataclass(frozen=True)
class OracleConfig:
    mode: OracleMode = OracleMode.ORDERED_FP16
    fused: bool = False


def _bits(m) -> np.ndarray:
    m = np.asarray(m)
    if m.dtype == np.float16:
        return m.view(np.uint16)
    if m.dtype != np.uint16:
        raise TypeError(f"expected uint16 bit patterns or float16, got {m.dtype}")
    return m


def _shapes(A, B, C0):
    A, B = _bits(A), _bits(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, B {B.shape}")
    m, n = A.shape[0], B.shape[1]
    if C0 is None:
        C0 = np.zeros((m, n), np.uint16)
    C0 = _bits(C0)
    if C0.shape != (m, n):
        raise ValueError(f"C0 shape {C0.shape} != {(m, n)}")
    return A, B, C0


def oracle_gemm(A, B, C0=None, config: OracleConfig = OracleConfig()):
    """C0 + A @ B.  Returns uint16 bits (ORDERED_FP16) or float64 values (FLOAT64)."""
    A, B, C0 = _shapes(A, B, C0)
    if config.mode is OracleMode.FLOAT64:
        f = lambda x: x.view(np.float16).astype(np.float64)
        return f(C0) + f(A) @ f(B)
    C = C0.copy()
    for k in range(A.shape[1]):
        C = fp16.vec_mac(C, A[:, k:k + 1], B[k:k + 1, :], fused=config.fused)
    return C


def oracle_gemm_scalar(A, B, C0=None, fused: bool = False) -> np.ndarray:
    """Same k order, scalar ``Half`` arithmetic, loops nested n, m, k."""
    A, B, C0 = _shapes(A, B, C0)
    m, K = A.shape
    n = B.shape[1]
    out = np.empty((m, n), np.uint16)
    for j in range(n):
        col = [Half(int(x)) for x in B[:, j]]
        for i in range(m):
            acc = Half(int(C0[i, j]))
            row = A[i]
            for k in range(K):
                acc = fp16.mac(acc, Half(int(row[k])), col[k], fused=fused)
            out[i, j] = acc.bits
    return out


_ELTWISE = ("add", "sub", "mul")


def oracle_eltwise(op: str, A, B) -> np.ndarray:
    """Lane-wise binary16 ``add``/``sub``/``mul``; ``sub`` is ``a + (-1 * b)``."""
    if op not in _ELTWISE:
        raise ValueError(f"unknown element-wise op {op!r}")
    A, B = _bits(A), _bits(B)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    if op == "add":
        return fp16.vec_add(A, B)
    if op == "mul":
        return fp16.vec_mul(A, B)
    return fp16.vec_add(A, fp16.vec_mul(B, np.uint16(fp16.NEG_ONE)))


def oracle_eltwise_scalar(op: str, A, B) -> np.ndarray:
    if op not in _ELTWISE:
        raise ValueError(f"unknown element-wise op {op!r}")
    A, B = _bits(A), _bits(B)
    neg = Half(fp16.NEG_ONE)
    fn = {"add": fp16.add, "mul": fp16.mul, "sub": lambda a, b: fp16.add(a, fp16.mul(b, neg))}[op]
    flat = [fn(Half(a), Half(b)).bits for a, b in zip(A.ravel().tolist(), B.ravel().tolist())]
    return np.array(flat, np.uint16).reshape(A.shape)


def relative_errors(got_bits, ref: np.ndarray) -> np.ndarray:
    """Per-element |got - ref| / |ref| (entries with ref == 0 compare absolutely)."""
    got = _bits(got_bits).view(np.float16).astype(np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    err = np.abs(got - ref)
    denom = np.abs(ref)
    return np.where(denom > 0, err / np.where(denom > 0, denom, 1.0), err)


def gemm_tolerance(K: int) -> float:
    return 2.0 ** -7 * np.sqrt(K)


def mismatches(a_bits, b_bits) -> int:
    return int(np.count_nonzero(_bits(a_bits) != _bits(b_bits)))
