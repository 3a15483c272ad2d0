"""Dense float64 matrix kernels shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major (C) order.
All arithmetic is done in float64; checkpoints down-cast to float32 on disk
(see :mod:`dha.checkpoint`).
"""

import numpy as np

from .errors import ShapeError

__all__ = ["as_matrix", "matmul", "softmax_rows", "frobenius_norm_sq"]


def as_matrix(a) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-subtracted for stability.

    Each output row is nonnegative and sums to 1 (within ~1e-12 of it).
    """
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def frobenius_norm_sq(m: np.ndarray) -> float:
    """Sum of squared entries."""
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * m))
