"""Dense float64 kernels shared by every other module.

A "matrix" here is a 2-D ``numpy.ndarray`` of dtype float64. The helpers
validate shapes and raise :class:`ShapeError` with both operand shapes in
the message so callers can see exactly what failed to conform.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def outer(u, v) -> np.ndarray:
    return np.outer(np.ravel(u), np.ravel(v)).astype(np.float64)


def column_norms(m: np.ndarray) -> np.ndarray:
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("column_norms of an empty matrix")
    return np.sqrt(np.sum(m * m, axis=0))


def row_norms(m: np.ndarray) -> np.ndarray:
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("row_norms of an empty matrix")
    return np.sqrt(np.sum(m * m, axis=1))


def frobenius_norm(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def _check_removal(size: int, idx, axis_name: str) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"{axis_name} index {idx.tolist()} out of range for size {size}")
    if len(np.unique(idx)) != idx.size:
        raise IndexError(f"duplicate {axis_name} indices {idx.tolist()}")
    if size - idx.size < 1:
        raise ShapeError(f"removing {idx.size} {axis_name}(s) would empty a dimension of size {size}")
    return idx


def remove_column(m: np.ndarray, j) -> np.ndarray:
    """Drop column(s) ``j``; remaining columns keep their order."""
    m = as_matrix(m)
    return np.delete(m, _check_removal(m.shape[1], j, "column"), axis=1)


def remove_row(m: np.ndarray, j) -> np.ndarray:
    m = as_matrix(m)
    return np.delete(m, _check_removal(m.shape[0], j, "row"), axis=0)


def gelu(x):
    """Exact GELU, ``u * Phi(u)``."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_prime(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def silu_prime(x):
    s = sigmoid(x)
    return s * (1.0 + np.asarray(x, dtype=np.float64) * (1.0 - s))


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Rng:
    """Seeded random stream; the same seed always yields the same fills."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal((rows, cols)) * std

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def spawn_seeds(self, n: int) -> list[int]:
        return [int(s) for s in self._gen.integers(0, 2**63 - 1, size=n)]

    @property
    def generator(self) -> np.random.Generator:
        return self._gen
