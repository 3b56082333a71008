"""Dense symmetric linear algebra and resampling-weight primitives.

Everything here is sized for parameter counts of at most a few thousand,
so matrices are stored densely.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import InputError, NumericalError

SYMMETRY_RTOL = 1e-10


class EigenDecomposition(NamedTuple):
    """Eigenvalues in ascending order and orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


class CholeskyFactor(NamedTuple):
    """Lower Cholesky factor ``C`` with ``M = C @ C.T``."""

    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve((self.lower, True), b, check_finite=False)

    def inverse_sqrt_apply(self, z: np.ndarray) -> np.ndarray:
        """Return ``C^{-T} z``; columns of the result have covariance ``M^{-1}``."""
        return scipy.linalg.solve_triangular(
            self.lower, z, trans="T", lower=True, check_finite=False
        )


def check_symmetric(m: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError("matrix has non-finite entries")
    scale = max(float(np.abs(m).max(initial=0.0)), 1.0)
    if np.abs(m - m.T).max(initial=0.0) > rtol * scale:
        raise InputError("matrix is not symmetric")
    return m


def sym_eigendecomp(m: np.ndarray) -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix (ascending eigenvalues)."""
    m = check_symmetric(m)
    # only the lower triangle is read by LAPACK ?syevd
    vals, vecs = np.linalg.eigh(m)
    return EigenDecomposition(vals, vecs)


def cholesky(m: np.ndarray) -> CholeskyFactor:
    m = check_symmetric(m)
    try:
        c = scipy.linalg.cholesky(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "Cholesky factorization failed; matrix is not positive definite "
            "(was the dampening policy applied?)"
        ) from exc
    return CholeskyFactor(c)


def solve_spd(m: np.ndarray | CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve ``M X = B`` for symmetric positive definite ``M``.

    ``m`` may be a matrix or an existing :class:`CholeskyFactor`, which lets
    callers solve against many right-hand sides without refactorizing.
    """
    factor = m if isinstance(m, CholeskyFactor) else cholesky(m)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor.dim:
        raise InputError(f"right-hand side has {b.shape[0]} rows, expected {factor.dim}")
    return factor.solve(b)


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def multinomial_sample(
    n: int, rng: np.random.Generator | int | None, size: int | None = None
) -> np.ndarray:
    """Bootstrap count weights ``w ~ Multinomial(n, 1/n)``.

    With ``size`` given, returns a ``(size, n)`` array of independent draws.
    """
    if n < 1:
        raise InputError("multinomial_sample needs n >= 1")
    gen = as_generator(rng)
    p0 = np.full(n, 1.0 / n)
    return gen.multinomial(n, p0, size=size).astype(np.int64)


def multinomial_covariance(n: int) -> np.ndarray:
    """Exact covariance of ``Multinomial(n, 1/n)`` counts: ``I - 11^T / n``."""
    return np.eye(n) - np.full((n, n), 1.0 / n)
