"""Variance-optimal proposals for importance-sampled PRF kernel estimation.

For inputs q, k iid with covariance Lambda, the expected Monte Carlo variance
of the importance-weighted PRF estimator is governed by the second-moment
objective

    V(psi) = integral  p_I(omega)^2 / psi(omega) * B_q(omega) B_k(omega),

with B_x(omega) = E_x[exp(2 omega^T x - ||x||^2)].  For Gaussian inputs the
objective has closed-form ingredients and a Gaussian minimizer
N(0, (I + 2 Lambda)(I - 2 Lambda)^{-1}), valid while every eigenvalue of
Lambda is below 1/2.  This module provides the closed forms, a d=1 quadrature
verifier for V, and the Monte Carlo machinery that measures realized
estimator variance.

A subtlety worth keeping in mind: V(psi) can be infinite for perfectly
reasonable-looking proposals.  In d=1 the integrand decays only if
2*beta + 1/(2 sigma^2) < 1 with beta = 2*lambda/(2*lambda + 1), so the
isotropic proposal is non-integrable once lambda > 1/6.  Non-integrable
cells are reported as +inf rather than silently truncated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .kernels import as_geometry, proposal_weights, softmax_kernel_exact
from .linalg import cholesky_psd, sym_eig
from .rng import SeededRng, gaussian_sample

OPTIMAL_LAMBDA_LIMIT = 0.5


class InvalidProposalError(ValueError):
    """The optimal proposal is not integrable (some eigenvalue >= 1/2)."""


class NonIntegrableError(ValueError):
    """The variance objective diverges for this proposal."""


class QuadratureNotConvergedError(RuntimeError):
    """Node doubling failed to reach the requested relative tolerance."""


@dataclass(frozen=True)
class GaussianInputSpec:
    """Covariance Lambda of the query/key distribution, eigendata cached.

    ``valid_for_optimal`` is True only when the largest eigenvalue is below
    1/2, the integrability condition for the optimal Gaussian proposal.
    """

    lam: np.ndarray
    eigvecs: np.ndarray = field(repr=False, default=None)
    eigvals: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_covariance(cls, lam: np.ndarray) -> "GaussianInputSpec":
        lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
        eig = sym_eig(lam)
        if eig.values[-1] < -1e-10 * max(abs(eig.values[0]), 1.0):
            raise ValueError("Lambda must be positive semidefinite")
        values = np.clip(eig.values, 0.0, None)
        return cls(lam=lam, eigvecs=eig.vectors, eigvals=values)

    @classmethod
    def isotropic(cls, variance: float, d: int) -> "GaussianInputSpec":
        return cls.from_covariance(variance * np.eye(d))

    @property
    def dim(self) -> int:
        return self.lam.shape[0]

    @property
    def valid_for_optimal(self) -> bool:
        return bool(self.eigvals[0] < OPTIMAL_LAMBDA_LIMIT)

    @property
    def betas(self) -> np.ndarray:
        return 2.0 * self.eigvals / (2.0 * self.eigvals + 1.0)

    def sample_factor(self) -> np.ndarray:
        """A factor F with F^T F = Lambda, for drawing inputs as u @ F."""
        return cholesky_psd(self.lam, jitter=0.0).T


@dataclass(frozen=True)
class VarianceReport:
    """Monte Carlo variance statistics for one estimator configuration."""

    estimator_id: str
    m: int
    trials: int
    mean: float
    variance: float
    variance_se: float
    exact_value: float


@dataclass(frozen=True)
class QuadratureSpec:
    """Composite-Simpson controls: interval, starting nodes, tolerance."""

    half_width: float | None = None
    initial_intervals: int = 128
    rel_tol: float = 1e-8
    max_doublings: int = 24


def empirical_B(omega: np.ndarray, x: np.ndarray) -> float:
    """Dataset average of exp(2 omega^T x_i - ||x_i||^2), log-stabilized."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    omega = np.asarray(omega, dtype=np.float64)
    expo = 2.0 * (x @ omega) - np.einsum("ij,ij->i", x, x)
    return float(np.exp(logsumexp(expo) - np.log(x.shape[0])))


def log_gaussian_B(omega: np.ndarray, spec: GaussianInputSpec) -> float:
    """log B for Gaussian inputs: sum_i [log c_i + beta_i (omega'_i)^2].

    The constants c_i = (2 lambda_i + 1)^{-1/2} come from completing the
    square in the one-dimensional integral E[exp(2 w x - x^2)] per
    eigencoordinate, with omega' = U^T omega.
    """
    omega = np.asarray(omega, dtype=np.float64)
    rotated = spec.eigvecs.T @ omega
    log_c = -0.5 * np.sum(np.log(2.0 * spec.eigvals + 1.0))
    return float(log_c + np.sum(spec.betas * rotated**2))


def gaussian_B(omega: np.ndarray, spec: GaussianInputSpec) -> float:
    """Closed-form B for Gaussian inputs, normalizing constants included."""
    return float(np.exp(log_gaussian_B(omega, spec)))


def optimal_sigma_star(spec: GaussianInputSpec) -> np.ndarray:
    """Covariance of the variance-optimal Gaussian proposal.

    Sigma* = U diag((1 + 2 lambda_i) / (1 - 2 lambda_i)) U^T; it shares the
    eigenbasis of Lambda and requires every lambda_i < 1/2 so the proposal is
    integrable.
    """
    if not spec.valid_for_optimal:
        raise InvalidProposalError(
            f"max eigenvalue {spec.eigvals[0]:.4g} >= 1/2: the optimal proposal "
            "is not integrable"
        )
    ratios = (1.0 + 2.0 * spec.eigvals) / (1.0 - 2.0 * spec.eigvals)
    return (spec.eigvecs * ratios) @ spec.eigvecs.T


def psi_star_logdensity(omega: np.ndarray, spec: GaussianInputSpec) -> float:
    """Unnormalized log density of the optimal proposal.

    log psi*(omega) = -0.5 ||omega||^2 + 0.5 (log B_q + log B_k) up to an
    additive constant; with matching covariances B_q = B_k so the bracket is
    just log B.
    """
    omega = np.asarray(omega, dtype=np.float64)
    return float(-0.5 * omega @ omega + log_gaussian_B(omega, spec))


def _objective_exponent(proposal_var: float, lam: float) -> float:
    """Coefficient a in integrand ~ exp(-a omega^2); a <= 0 means divergence."""
    beta = 2.0 * lam / (2.0 * lam + 1.0)
    return 1.0 - 2.0 * beta - 0.5 / proposal_var


def _simpson_doubling(f, lo: float, hi: float, quad: QuadratureSpec) -> float:
    """Composite Simpson with node doubling until successive values agree."""

    def simpson(n_intervals: int) -> float:
        grid = np.linspace(lo, hi, n_intervals + 1)
        vals = f(grid)
        h = grid[1] - grid[0]
        return h / 3.0 * (vals[0] + vals[-1] + 4.0 * vals[1:-1:2].sum() + 2.0 * vals[2:-1:2].sum())

    n = quad.initial_intervals
    prev = simpson(n)
    for _ in range(quad.max_doublings):
        n *= 2
        curr = simpson(n)
        if abs(curr - prev) <= quad.rel_tol * max(abs(curr), np.finfo(float).tiny):
            return float(curr)
        prev = curr
    raise QuadratureNotConvergedError(
        f"Simpson doubling did not converge to {quad.rel_tol} within "
        f"{quad.max_doublings} doublings"
    )


def variance_objective_quadrature(
    proposal_var: float, lam: float, quad: QuadratureSpec | None = None
) -> float:
    """V for a d=1 Gaussian proposal N(0, proposal_var), by composite Simpson.

    Returns the per-feature second-moment integral (multiply by 1/m for a
    feature budget of m).  The quadrature interval is chosen so the integrand
    at the endpoints is below 1e-16 of its peak, and the node count is
    doubled until successive composite-Simpson values agree to ``rel_tol``.
    """
    if proposal_var <= 0:
        raise ValueError("proposal variance must be positive")
    if not 0 <= lam < OPTIMAL_LAMBDA_LIMIT:
        raise ValueError("lambda must lie in [0, 1/2)")
    quad = quad or QuadratureSpec()
    a = _objective_exponent(proposal_var, lam)
    if a <= 0:
        raise NonIntegrableError(
            f"exponent coefficient {a:.4g} is not negative: V diverges for "
            f"proposal variance {proposal_var} at lambda {lam}"
        )
    # integrand: (2*pi)^{-1/2} * s * c^2 * exp(-a w^2), c^2 = 1/(2 lam + 1)
    scale = np.sqrt(proposal_var / (2.0 * np.pi)) / (2.0 * lam + 1.0)
    half_width = quad.half_width
    if half_width is None:
        half_width = np.sqrt(16.0 * np.log(10.0) / a)
    return _simpson_doubling(lambda w: scale * np.exp(-a * w**2), -half_width, half_width, quad)


def pair_variance_quadrature(
    q: float, k: float, proposal_var: float, m: int, quad: QuadratureSpec | None = None
) -> float:
    """Var of the d=1 importance-weighted estimator for one fixed (q, k).

    Unlike the expected-variance objective, the per-pair variance is finite
    for every Gaussian proposal with variance above 1/2: the second-moment
    integrand exp(-(1 - 1/(2 s^2)) w^2 + 2 c w) with c = q + k always decays.
    This is the quadrature reference for fixed-pair Monte Carlo checks.
    """
    if proposal_var <= 0.5:
        raise NonIntegrableError("per-pair variance needs proposal variance > 1/2")
    quad = quad or QuadratureSpec()
    a = 1.0 - 0.5 / proposal_var
    c = float(q) + float(k)
    center = c / a
    peak_log = c * c / a - q * q - k * k
    scale = np.sqrt(proposal_var / (2.0 * np.pi))
    half_width = quad.half_width
    if half_width is None:
        half_width = np.sqrt(16.0 * np.log(10.0) / a)

    def integrand(w):
        return scale * np.exp(-a * (w - center) ** 2 + peak_log)

    second_moment = _simpson_doubling(integrand, center - half_width, center + half_width, quad)
    kappa = np.exp(q * k)
    return float((second_moment - kappa**2) / m)


def expected_squared_kernel(spec: GaussianInputSpec) -> float:
    """E[exp(q^T k)^2] over q, k ~ N(0, Lambda): prod_i (1 - 4 lambda_i^2)^{-1/2}."""
    if not spec.valid_for_optimal:
        raise InvalidProposalError("E[kappa^2] requires all eigenvalues < 1/2")
    return float(np.prod((1.0 - 4.0 * spec.eigvals**2) ** -0.5))


def expected_variance_quadrature(
    proposal_var: float, lam: float, m: int, quad: QuadratureSpec | None = None
) -> float:
    """Expected MC variance E[Var kappa_hat] at budget m: (V - E[kappa^2]) / m.

    +inf for non-integrable proposals; this is the quadrature reference the
    Monte Carlo estimates are checked against.
    """
    spec = GaussianInputSpec.isotropic(lam, 1)
    try:
        v = variance_objective_quadrature(proposal_var, lam, quad)
    except NonIntegrableError:
        return float("inf")
    return (v - expected_squared_kernel(spec)) / m


class PairEstimator:
    """Strategy for drawing m feature samples and evaluating one (q, k) pair."""

    estimator_id: str = "base"

    def sample_values(self, q: np.ndarray, k: np.ndarray, m: int, rng: SeededRng) -> np.ndarray:
        raise NotImplementedError

    def exact(self, q: np.ndarray, k: np.ndarray) -> float:
        return softmax_kernel_exact(q, k)


class IsotropicPrfEstimator(PairEstimator):
    """Plain PRF sampling from p_I."""

    estimator_id = "p_I"

    def sample_values(self, q, k, m, rng):
        omegas = gaussian_sample(rng, m, q.shape[0])
        return np.exp(omegas @ (q + k) - 0.5 * (q @ q) - 0.5 * (k @ k))


class GaussianProposalEstimator(PairEstimator):
    """Importance-weighted PRF sampling from N(0, Sigma_psi)."""

    def __init__(self, proposal_sigma: np.ndarray, estimator_id: str = "psi"):
        self.geometry = as_geometry(proposal_sigma)
        self.estimator_id = estimator_id
        self._draw_factor = self.geometry.factor

    def sample_values(self, q, k, m, rng):
        u = gaussian_sample(rng, m, q.shape[0])
        omegas = u @ self._draw_factor
        weights = proposal_weights(omegas, self.geometry)
        return weights * np.exp(omegas @ (q + k) - 0.5 * (q @ q) - 0.5 * (k @ k))


class ExactKernelEstimator(PairEstimator):
    """Deterministic reference returning the exact kernel value m times."""

    estimator_id = "exact"

    def sample_values(self, q, k, m, rng):
        return np.full(m, softmax_kernel_exact(q, k))


def _sample_variance_se(values: np.ndarray) -> float:
    """SE of the sample variance from the fourth-moment formula.

    Var(s^2) = (mu_4 - sigma^4 (n-3)/(n-1)) / n with plug-in central moments.
    """
    n = values.shape[0]
    centered = values - values.mean()
    mu4 = float(np.mean(centered**4))
    s2 = float(values.var(ddof=1))
    return float(np.sqrt(max(mu4 - s2**2 * (n - 3) / (n - 1), 0.0) / n))


def mc_variance(
    estimator: PairEstimator,
    source: GaussianInputSpec | Sequence[tuple[np.ndarray, np.ndarray]],
    m: int,
    trials: int,
    rng: SeededRng,
) -> VarianceReport:
    """Monte Carlo estimate of the estimator's variance at feature budget m.

    With a GaussianInputSpec, (q, k) are resampled per trial and ``variance``
    is the across-trial average of within-trial variance contributions
    (sample variance of the m values over m), an unbiased estimate of the
    expected variance E_{q,k}[Var_omega kappa_hat]; its SE is the iid
    standard error of the contributions.  Beware that for wide input
    covariances the expected variance can be infinite (see module docstring),
    in which case this average has no limit and its SE is diagnostic only.

    With a fixed pair list, trials are cycled over the pairs and ``variance``
    is the mean over pairs of the across-trial sample variance of kappa_hat,
    with the SE from the fourth-moment formula combined across pairs.  This
    estimand is always finite.
    """
    if trials < 100:
        raise ValueError("need trials >= 100")
    from_spec = isinstance(source, GaussianInputSpec)
    if from_spec:
        factor = source.sample_factor()
        pairs = None
    else:
        pairs = [
            (np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64))
            for q, k in source
        ]
    means = np.empty(trials)
    contribs = np.empty(trials)
    exacts = np.empty(trials)
    for t in range(trials):
        trial_rng = rng.derive(t)
        if from_spec:
            qk = gaussian_sample(trial_rng.derive(0), 2, source.dim) @ factor
            q, k = qk[0], qk[1]
        else:
            q, k = pairs[t % len(pairs)]
        values = estimator.sample_values(q, k, m, trial_rng.derive(1))
        means[t] = values.mean()
        contribs[t] = values.var(ddof=1) / m
        exacts[t] = estimator.exact(q, k)
    if from_spec:
        variance = float(contribs.mean())
        variance_se = float(contribs.std(ddof=1) / np.sqrt(trials))
    else:
        per_pair_var = []
        se_sq = 0.0
        for p in range(len(pairs)):
            group = means[p :: len(pairs)]
            per_pair_var.append(group.var(ddof=1))
            se_sq += _sample_variance_se(group) ** 2
        variance = float(np.mean(per_pair_var))
        variance_se = float(np.sqrt(se_sq) / len(pairs))
    return VarianceReport(
        estimator_id=estimator.estimator_id,
        m=m,
        trials=trials,
        mean=float(means.mean()),
        variance=variance,
        variance_se=variance_se,
        exact_value=float(exacts.mean()),
    )
