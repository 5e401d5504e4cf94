"""Dense symmetric linear algebra with explicit tolerance contracts.

Factorizations are delegated to LAPACK via numpy; the contracts here are the
tolerances and the jitter/retry policy, not the algorithms.  All matrices are
row-major, contiguous float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_RTOL = 1e-12


class NotPSDError(np.linalg.LinAlgError):
    """Matrix is not positive semidefinite within the jitter budget."""


class NoConvergenceError(np.linalg.LinAlgError):
    """Eigensolver failed to converge within its iteration cap."""


@dataclass(frozen=True)
class SymmetricEigen:
    """Eigendecomposition A = U diag(values) U^T with values descending."""

    vectors: np.ndarray  # (d, d), columns are eigenvectors
    values: np.ndarray  # (d,), descending

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _require_symmetric(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{what} must be square, got shape {a.shape}")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > SYMMETRY_RTOL * scale:
        raise ValueError(f"{what} is not symmetric within {SYMMETRY_RTOL} relative")
    return a


def cholesky_psd(a: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower-triangular L with L L^T = A + jitter_used * I.

    Starts from the supplied jitter (default 0).  On failure the jitter is
    retried at ``1e-12 * trace(A)/d`` and escalated by 10x per retry, at most
    3 retries, after which NotPSDError reports the smallest pivot seen.
    """
    a = _require_symmetric(a, "A")
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    d = a.shape[0]
    eye = np.eye(d)
    current = float(jitter)
    for _ in range(4):
        try:
            return np.linalg.cholesky(a + current * eye)
        except np.linalg.LinAlgError:
            base = max(1e-12 * np.trace(a) / d, np.finfo(float).eps)
            current = base if current == 0.0 else current * 10.0
    raise NotPSDError(
        f"not PSD after jitter retries (last jitter {current/10.0:.3e}, "
        f"smallest pivot {_smallest_pivot(a):.3e})"
    )


def _smallest_pivot(a: np.ndarray) -> float:
    """Smallest diagonal pivot of the (possibly failing) factorization."""
    n = a.shape[0]
    work = a.copy()
    smallest = np.inf
    for j in range(n):
        pivot = work[j, j]
        smallest = min(smallest, pivot)
        if pivot <= 0.0:
            return smallest
        ljj = np.sqrt(pivot)
        col = work[j + 1 :, j] / ljj
        work[j + 1 :, j + 1 :] -= np.outer(col, col)
    return smallest


def sym_eig(a: np.ndarray) -> SymmetricEigen:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Delegates to LAPACK's tridiagonal solver (``numpy.linalg.eigh``); the
    contract is the reconstruction tolerance (1e-9 relative Frobenius) and
    orthogonality of the eigenvector matrix, not the algorithm.
    """
    a = _require_symmetric(a, "A")
    sym = 0.5 * (a + a.T)
    try:
        values, vectors = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NoConvergenceError(f"eigh did not converge: {exc}") from exc
    return SymmetricEigen(vectors=vectors[:, ::-1].copy(), values=values[::-1].copy())
