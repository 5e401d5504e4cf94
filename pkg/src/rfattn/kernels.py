"""Exact softmax-type kernels, Mahalanobis geometry, and Monte Carlo estimators.

The estimators form an unbiasedness triple: the plain PRF estimator of
exp(q^T k), the importance-weighted estimator under an arbitrary proposal,
and the data-aware estimator of exp(q^T Sigma k).  Importance weights are
never clipped or self-normalized; the raw variance is the quantity under
study.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .features import EXP_GUARD, ProjectionSet
from .linalg import sym_eig

SIGMA_COND_TOL = 1e-12


class KernelOverflowError(FloatingPointError):
    """A kernel exponent exceeded the double-precision guard (700)."""


class SingularSigmaError(np.linalg.LinAlgError):
    """Sigma is numerically singular; density ratios are undefined."""


class InvalidWeightError(ValueError):
    """An importance weight was negative or non-finite."""


def _validate_weights(weights: np.ndarray) -> None:
    # exact zeros are tolerated: a positive density ratio can underflow in
    # double precision far in the proposal's tail
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InvalidWeightError("importance weights must be nonnegative and finite")


@dataclass(frozen=True)
class KernelEstimate:
    """A Monte Carlo kernel estimate, optionally retaining per-sample values."""

    value: float
    m: int
    samples: np.ndarray | None = None


class SigmaGeometry:
    """Cached geometry of Sigma = factor^T factor.

    Sigma, its eigendecomposition, inverse and log-determinant are computed
    once at construction and reused by every estimator call.  ``valid`` is
    False when Sigma is numerically singular (rank-deficient factor), in
    which case density ratios raise SingularSigmaError but the data-aware
    estimator itself remains usable.
    """

    def __init__(self, factor: np.ndarray):
        factor = np.asarray(factor, dtype=np.float64)
        if factor.ndim != 2:
            raise ValueError("factor must be 2-d (r x d)")
        self.factor = factor
        self.sigma = factor.T @ factor
        eig = sym_eig(self.sigma)
        self._eig = eig
        lam_max = max(eig.values[0], 0.0)
        self.valid = bool(eig.values[-1] > SIGMA_COND_TOL * max(lam_max, np.finfo(float).tiny))
        if self.valid:
            inv_vals = 1.0 / eig.values
            self.sigma_inv = (eig.vectors * inv_vals) @ eig.vectors.T
            self.log_det = float(np.sum(np.log(eig.values)))
        else:
            self.sigma_inv = None
            self.log_det = None

    @classmethod
    def from_sigma(cls, sigma: np.ndarray) -> "SigmaGeometry":
        """Geometry for an explicit covariance, factored internally."""
        from .linalg import cholesky_psd

        return cls(cholesky_psd(np.asarray(sigma, dtype=np.float64)).T)

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    def _require_valid(self) -> None:
        if not self.valid:
            raise SingularSigmaError(
                "Sigma is singular (smallest eigenvalue below "
                f"{SIGMA_COND_TOL} of the largest)"
            )

    def log_density_ratio(self, omegas: np.ndarray) -> np.ndarray:
        """log of w_Sigma(omega) = p_Sigma(omega) / p_I(omega), rowwise."""
        self._require_valid()
        omegas = np.atleast_2d(np.asarray(omegas, dtype=np.float64))
        quad_i = np.einsum("ij,ij->i", omegas, omegas)
        quad_s = np.einsum("ij,jk,ik->i", omegas, self.sigma_inv, omegas)
        return -0.5 * self.log_det + 0.5 * (quad_i - quad_s)


def as_geometry(sigma) -> SigmaGeometry:
    """Coerce to SigmaGeometry; a raw array is interpreted as the covariance."""
    if isinstance(sigma, SigmaGeometry):
        return sigma
    return SigmaGeometry.from_sigma(np.asarray(sigma, dtype=np.float64))


def _guarded_exp(exponent: float) -> float:
    if exponent > EXP_GUARD:
        raise KernelOverflowError(f"kernel exponent {exponent:.3g} exceeds {EXP_GUARD}")
    return float(np.exp(exponent))


def softmax_kernel_exact(q: np.ndarray, k: np.ndarray) -> float:
    """exp(q^T k), the unnormalized similarity inside softmax attention."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape:
        raise ValueError("q and k must have equal dims")
    return _guarded_exp(float(q @ k))


def sigma_kernel_exact(q: np.ndarray, k: np.ndarray, sigma: np.ndarray) -> float:
    """exp(q^T Sigma k); equals softmax_kernel_exact(Mq, Mk) for Sigma = M^T M."""
    sigma = np.asarray(sigma, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    return _guarded_exp(float(q @ sigma @ k))


def mahalanobis_dist2(x: np.ndarray, y: np.ndarray, sigma: np.ndarray) -> float:
    """Squared Mahalanobis distance (x-y)^T Sigma (x-y)."""
    delta = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(delta @ np.asarray(sigma, dtype=np.float64) @ delta)


def importance_weight(omega: np.ndarray, sigma) -> float:
    """w_Sigma(omega) = p_Sigma(omega) / p_I(omega) for Sigma > 0.

    Equals det(Sigma)^(-1/2) exp(0.5 omega^T (I - Sigma^{-1}) omega) and is
    strictly positive.
    """
    geometry = as_geometry(sigma)
    return float(np.exp(geometry.log_density_ratio(omega)[0]))


def proposal_weights(omegas: np.ndarray, proposal) -> np.ndarray:
    """Importance factors p_I(omega) / psi(omega) for a Gaussian proposal psi."""
    geometry = as_geometry(proposal)
    return np.exp(-geometry.log_density_ratio(omegas))


def _pair_sample_values(
    omegas: np.ndarray, q: np.ndarray, k: np.ndarray, norm_q: float, norm_k: float
) -> np.ndarray:
    expo = omegas @ q + omegas @ k - norm_q - norm_k
    if expo.size and expo.max() > EXP_GUARD:
        raise KernelOverflowError("per-sample exponent exceeds overflow guard")
    return np.exp(expo)


def _finish(samples: np.ndarray, keep_samples: bool) -> KernelEstimate:
    return KernelEstimate(
        value=float(samples.mean()),
        m=samples.shape[0],
        samples=samples if keep_samples else None,
    )


def prf_estimate(
    q: np.ndarray, k: np.ndarray, omega_set: ProjectionSet, keep_samples: bool = False
) -> KernelEstimate:
    """Plain PRF estimator of exp(q^T k) from isotropic projections."""
    if omega_set.law != "isotropic":
        raise ValueError("prf_estimate requires isotropic projections")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    samples = _pair_sample_values(omega_set.omegas, q, k, 0.5 * (q @ q), 0.5 * (k @ k))
    return _finish(samples, keep_samples)


def importance_estimate(
    q: np.ndarray,
    k: np.ndarray,
    omegas: np.ndarray | ProjectionSet,
    weight_fn: Callable[[np.ndarray], np.ndarray],
    keep_samples: bool = False,
) -> KernelEstimate:
    """Importance-weighted PRF estimator of exp(q^T k).

    ``omegas`` are draws from a proposal psi with full support and
    ``weight_fn(omegas)`` must return the factors p_I(omega) / psi(omega);
    the estimator is then unbiased for any such psi.
    """
    if isinstance(omegas, ProjectionSet):
        omegas = omegas.omegas
    omegas = np.asarray(omegas, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    weights = np.asarray(weight_fn(omegas), dtype=np.float64)
    if weights.shape != (omegas.shape[0],):
        raise InvalidWeightError(f"weights must have shape ({omegas.shape[0]},)")
    _validate_weights(weights)
    samples = weights * _pair_sample_values(omegas, q, k, 0.5 * (q @ q), 0.5 * (k @ k))
    return _finish(samples, keep_samples)


def sigma_estimate_from_omegas(
    q: np.ndarray,
    k: np.ndarray,
    omegas: np.ndarray,
    sigma,
    weight_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    keep_samples: bool = False,
) -> KernelEstimate:
    """w-weighted empirical mean estimator of exp(q^T Sigma k), explicit draws.

    The normalizers use Sigma regardless of which law produced ``omegas``,
    which is what lets the same formula cover both the unweighted
    N(0, Sigma)-sampled estimator and its w_Sigma-weighted isotropic twin.
    """
    geometry = as_geometry(sigma)
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    omegas = np.asarray(omegas, dtype=np.float64)
    norm_q = 0.5 * float(q @ geometry.sigma @ q)
    norm_k = 0.5 * float(k @ geometry.sigma @ k)
    samples = _pair_sample_values(omegas, q, k, norm_q, norm_k)
    if weight_fn is not None:
        weights = np.asarray(weight_fn(omegas), dtype=np.float64)
        _validate_weights(weights)
        samples = weights * samples
    return _finish(samples, keep_samples)


def sigma_estimate(
    q: np.ndarray,
    k: np.ndarray,
    u_draws: np.ndarray,
    factor: np.ndarray,
    weight_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    keep_samples: bool = False,
) -> KernelEstimate:
    """Data-aware PRF estimator of exp(q^T Sigma k) with omega_j = factor^T u_j.

    Unweighted this is the learned-geometry estimator; with factor = I and no
    weights it reduces to ``prf_estimate`` exactly.
    """
    factor = np.asarray(factor, dtype=np.float64)
    u_draws = np.asarray(u_draws, dtype=np.float64)
    if u_draws.ndim != 2 or u_draws.shape[1] != factor.shape[0]:
        raise ValueError("u_draws must be m x r with r = factor rank")
    omegas = u_draws @ factor
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    q_t = factor @ q
    k_t = factor @ k
    samples = _pair_sample_values(omegas, q, k, 0.5 * (q_t @ q_t), 0.5 * (k_t @ k_t))
    if weight_fn is not None:
        weights = np.asarray(weight_fn(omegas), dtype=np.float64)
        _validate_weights(weights)
        samples = weights * samples
    return _finish(samples, keep_samples)
