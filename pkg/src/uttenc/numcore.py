"""Dense numerical primitives shared by every other module.

Matrices are plain ``numpy.ndarray`` objects in float64, row-major, with
frames stored as rows (an L-frame, D-dimensional sequence is an (L, D)
array).  The helpers here are the numerically fussy bits: stable
row-wise softmax / log-sum-exp and seeded Gaussian sampling.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError("empty input")
    return a


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety.

    Each output row sums to 1 (within 1e-12) and the result is invariant
    to adding a constant to a row.
    """
    a = as_matrix(m)
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(m) -> np.ndarray:
    """Stable log(sum(exp(row))) per row, returned as a 1-D array."""
    a = as_matrix(m)
    mx = a.max(axis=1)
    return mx + np.log(np.exp(a - mx[:, None]).sum(axis=1))


def gaussian_sample(rng: Rng, rows: int, cols: int,
                    mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Seeded (rows, cols) matrix of i.i.d. Gaussian draws."""
    if rows < 1 or cols < 1:
        raise ValueError("empty input")
    if std < 0:
        raise ValueError("std must be >= 0")
    return rng.normal((rows, cols), mean=mean, std=std)
