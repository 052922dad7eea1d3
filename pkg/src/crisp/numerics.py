"""Dense linear algebra helpers and the finite-difference gradient oracle.

Everything operates on float64 numpy arrays: a "matrix" is a 2-D array in
row-major (C) order, a "vector" is a 1-D array.  Shapes are checked
explicitly and mismatches raise ``DimensionError`` instead of silently
broadcasting, because every backprop formula downstream depends on the
exact operand shapes.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateError, DimensionError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Validate and return ``a`` as a 1-D float64 array."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"inner dimensions differ: {a.shape} x {b.shape}"
        )
    return a @ b

def l2_normalize(v) -> tuple[np.ndarray, float]:
    """Return ``(v / ||v||, ||v||)``.

    Raises ``DegenerateError`` on a zero vector; there is deliberately no
    epsilon fallback, because a zero pre-normalization vector upstream is
    always a bug worth surfacing.
    """
    v = as_vector(v)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateError("cannot normalize a zero vector")
    return v / norm, norm


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    This is the reference oracle every hand-written backward pass in the
    training module is checked against; it must stay independent of those
    implementations.
    """
    x = as_vector(x)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite function value near coordinate {i}"
            )
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def pearson(a, b) -> float:
    """Signed Pearson correlation of two equal-length vectors."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.size != b.size:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise DimensionError("need at least 2 points")
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.dot(da, da))
    vb = float(np.dot(db, db))
    if va == 0.0 or vb == 0.0:
        raise DegenerateError("correlation undefined for zero variance")
    r = float(np.dot(da, db)) / np.sqrt(va * vb)
    # guard against rounding pushing |r| past 1
    return float(np.clip(r, -1.0, 1.0))
