"""Dense float64 kernels and the seeded splitmix64 generator.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Everything here is
pure except :class:`Prng`, which owns its state and must not be shared between runs.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

LOG_FLOOR = -30.0

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1
_TWO_POW_M53 = 1.0 / (1 << 53)


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def floored_log(x) -> np.ndarray | float:
    """Natural log clamped from below at ``LOG_FLOOR``; ``log(0)`` is ``LOG_FLOOR``."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("log argument must be non-negative")
    # libm per element: numpy's vectorized log is not bit-stable across CPUs
    out = np.array(
        [max(math.log(v), LOG_FLOOR) if v > 0 else LOG_FLOOR for v in arr.reshape(-1).tolist()],
        dtype=np.float64,
    ).reshape(arr.shape)
    if out.ndim == 0:
        return float(out)
    return out


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Works on any array whose last axis is the softmax axis, so a stack of
    per-head logit matrices can be passed directly.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError("softmax_rows needs rows of length >= 1")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def mean_over(stack, axes: int | Iterable[int]) -> np.ndarray:
    """Arithmetic mean of ``stack`` over ``axes``, keeping the other axes in order."""
    a = np.asarray(stack, dtype=np.float64)
    if a.ndim == 0:
        raise ValueError("mean_over needs an indexed stack, got a scalar")
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    for ax in axes:
        if a.shape[ax] == 0:
            raise ValueError(f"axis {ax} has zero extent")
    return a.mean(axis=axes)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Prng:
    """splitmix64 stream with Box-Muller Gaussians.

    Uniforms take the top 53 bits of each 64-bit output. Every Gaussian consumes
    exactly two uniforms ``u1, u2`` and returns ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``;
    the sine partner is discarded so the stream layout never depends on call parity.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix(self.state)

    def next_uniform(self) -> float:
        return (self.next_u64() >> 11) * _TWO_POW_M53

    def next_gaussian(self) -> float:
        u1 = self.next_uniform()
        u2 = self.next_uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` uniforms at once; bit-identical to ``n`` calls of :meth:`next_uniform`."""
        if n <= 0:
            return np.zeros(0)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK64
        return (z >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def gaussians(self, n: int) -> np.ndarray:
        # scalar libm calls: numpy's SIMD log/cos are not bit-identical to math.*
        u = self.uniforms(2 * n).tolist()
        log, cos, sqrt, tau = math.log, math.cos, math.sqrt, 2.0 * math.pi
        return np.array(
            [sqrt(-2.0 * log(1.0 - u[2 * i])) * cos(tau * u[2 * i + 1]) for i in range(n)],
            dtype=np.float64,
        )

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.gaussians(rows * cols).reshape(rows, cols)
