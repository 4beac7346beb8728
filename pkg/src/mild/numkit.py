"""Dense linear-algebra helpers and the seeded random source.

Matrices are plain ``numpy.ndarray`` objects (row-major float64). Nothing in
the package forms an explicit inverse; everything goes through a Cholesky
factor and triangular solves.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from mild.errors import DimensionMismatch, NotPositiveDefinite, SingularMatrix

SYMMETRY_TOL = 1e-9
JITTER_REL = 1e-6
JITTER_ABS = 1e-8


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-d, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def cholesky(m) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == m``.

    Raises :class:`NotPositiveDefinite` when a pivot is not strictly positive,
    which tells the caller to regularize first.
    """
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(L) > 0) or not np.all(np.isfinite(L)):
        raise NotPositiveDefinite("non-positive pivot")
    return L


def default_jitter(m) -> float:
    a = np.asarray(m, dtype=float)
    if a.size == 0:
        return JITTER_ABS
    return max(JITTER_REL * float(np.mean(np.abs(np.diag(a)))), JITTER_ABS)


def regularize_spd(m, eps: float | None = None) -> np.ndarray:
    """Return ``m + eps * I``; ``eps`` defaults to a scale-aware jitter."""
    a = as_matrix(m)
    if eps is None:
        eps = default_jitter(a)
    out = 0.5 * (a + a.T)
    out[np.diag_indices_from(out)] += eps
    return out


def safe_cholesky(m, eps: float | None = None) -> np.ndarray:
    """Cholesky, retrying once after :func:`regularize_spd`."""
    try:
        return cholesky(m)
    except NotPositiveDefinite:
        return cholesky(regularize_spd(m, eps))


def solve_triangular(l, b, lower: bool = True, trans: bool = False) -> np.ndarray:
    """Solve ``l @ x = b`` (or ``l.T @ x = b`` with ``trans``) for triangular ``l``."""
    l = np.asarray(l, dtype=float)
    b = np.asarray(b, dtype=float)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise DimensionMismatch(f"triangular factor must be square, got {l.shape}")
    if b.shape[0] != l.shape[0]:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, factor has {l.shape[0]}")
    if np.any(np.diag(l) == 0):
        raise SingularMatrix("zero on the diagonal of a triangular factor")
    return scipy.linalg.solve_triangular(l, b, lower=lower, trans=1 if trans else 0, check_finite=False)


def cho_solve(l, b) -> np.ndarray:
    """Solve ``(l @ l.T) x = b`` given the lower factor ``l``."""
    y = solve_triangular(l, b)
    return solve_triangular(l, y, trans=True)


def logdet_from_chol(l) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(l))))


def logsumexp(a, axis=None, keepdims: bool = False) -> np.ndarray:
    """``log(sum(exp(a)))`` with max-shift; all ``-inf`` slices give ``-inf``."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    """Seeded generator; identical seeds give bit-identical streams."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        seed = 0
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))
