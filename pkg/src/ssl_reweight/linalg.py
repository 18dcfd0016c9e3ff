"""Dense linear algebra helpers and the seeded random stream.

Everything is float64. Matrices are plain ``numpy.ndarray`` objects in
row-major (C) order.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

SYMMETRY_TOL = 1e-9


class NotPositiveDefiniteError(ArithmeticError):
    """Cholesky factorization failed; the caller should increase damping."""


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def cholesky(h) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    h = as_matrix(h)
    if h.shape[0] != h.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {h.shape}")
    asym = np.max(np.abs(h - h.T)) if h.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"matrix is not symmetric (max |H - H^T| = {asym:.3e})")
    if not np.all(np.isfinite(h)):
        raise ValueError("matrix has non-finite entries")
    try:
        return sla.cholesky(h, lower=True, check_finite=False)
    except sla.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            "Cholesky factorization failed; matrix is not positive definite "
            "(increase damping)"
        ) from exc


def cho_solve(factor: np.ndarray, v) -> np.ndarray:
    return sla.cho_solve((factor, True), np.asarray(v, dtype=np.float64), check_finite=False)


def solve_spd(h, v) -> np.ndarray:
    """Solve ``H x = v`` for symmetric positive definite ``H``.

    Raises ``ValueError`` for a non-symmetric ``H`` and
    ``NotPositiveDefiniteError`` when the factorization breaks down.
    """
    v = np.asarray(v, dtype=np.float64)
    factor = cholesky(h)
    if v.shape[0] != factor.shape[0]:
        raise ValueError(f"solve_spd dimension mismatch: H is {factor.shape}, v is {v.shape}")
    return cho_solve(factor, v)


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 is a fixed, documented bit generator; streams do not depend on platform.
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_normal(rng: np.random.Generator, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return mean + std * rng.standard_normal(int(n))
