"""Covariance learning: plug-in whitening and gradient descent on the factor M.

Gradients flow through the reparameterized draws omega_j = M^T u_j and
through the 0.5 x^T Sigma x normalizers; the learned-projection (LFK)
baseline trains the projection rows directly with a fixed isotropic
normalizer.  Plain gradient descent with a fixed learning rate is used
throughout so stability sweeps isolate the kernel's effect.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import DEFAULT_EPS, exact_attention
from .linalg import cholesky_psd, sym_eig
from .rng import SeededRng, gaussian_sample

DIVERGENCE_FACTOR = 1e6
_INIT_STREAM = 1_000_000_007


class InsufficientDataError(ValueError):
    """Too few samples to estimate a covariance."""


class NearSingularError(np.linalg.LinAlgError):
    """Estimated covariance is too ill-conditioned to invert."""


@dataclass(frozen=True)
class CovarianceFactor:
    """Learnable factor M (r x d) defining the kernel geometry Sigma = M^T M."""

    matrix: np.ndarray

    @property
    def rank(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return self.matrix.T @ self.matrix

    @classmethod
    def identity(cls, d: int) -> "CovarianceFactor":
        return cls(np.eye(d))


@dataclass(frozen=True)
class TrainTrace:
    """Per-step training record; ``diverged`` marks an explicit divergence event."""

    step: int
    loss: float
    grad_norm: float
    lr: float
    seed: int
    diverged: bool = False


@dataclass(frozen=True)
class TrainingBatch:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


class GaussianBatchSource:
    """Draws Q, K ~ N(0, Lambda) and V ~ N(0, I), L rows each."""

    def __init__(self, lam: np.ndarray, length: int):
        self.lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
        self.length = length
        self.dim = self.lam.shape[0]
        self._factor = cholesky_psd(self.lam).T

    def sample(self, rng: SeededRng) -> TrainingBatch:
        q = gaussian_sample(rng.derive(0), self.length, self.dim) @ self._factor
        k = gaussian_sample(rng.derive(1), self.length, self.dim) @ self._factor
        v = gaussian_sample(rng.derive(2), self.length, self.dim)
        return TrainingBatch(q=q, k=k, v=v)


def estimate_lambda(xq: np.ndarray, xk: np.ndarray, shrinkage: float = 0.0) -> np.ndarray:
    """Pooled covariance of queries and keys with isotropic shrinkage.

    Returns (1 - delta) * pooled empirical covariance + delta * (trace/d) I;
    each set is centered by its own mean and the two unbiased estimates are
    averaged.
    """
    xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
    xk = np.atleast_2d(np.asarray(xk, dtype=np.float64))
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    if xq.shape[0] < 2 or xk.shape[0] < 2:
        raise InsufficientDataError("need at least 2 rows per set")
    pooled = 0.5 * (np.cov(xq, rowvar=False) + np.cov(xk, rowvar=False))
    pooled = np.atleast_2d(pooled)
    d = pooled.shape[0]
    return (1.0 - shrinkage) * pooled + shrinkage * (np.trace(pooled) / d) * np.eye(d)


def plugin_whitening(lam_hat: np.ndarray) -> CovarianceFactor:
    """Whitening factor M = Lambda^{-1/2} via the symmetric eigendecomposition.

    With the true Lambda this gives Cov(M x) = I exactly; near-singular
    estimates are rejected with a pointer at the shrinkage knob.
    """
    eig = sym_eig(np.atleast_2d(np.asarray(lam_hat, dtype=np.float64)))
    # absolute floor: numerically constant inputs have nothing to whiten
    if eig.values[0] <= 1e-12 or eig.values[-1] <= 1e-10 * eig.values[0]:
        raise NearSingularError(
            "covariance estimate is near-singular; increase shrinkage"
        )
    m = (eig.vectors * eig.values**-0.5) @ eig.vectors.T
    return CovarianceFactor(m)


def _dark_features(x: np.ndarray, factor: np.ndarray, u: np.ndarray, shared_offset: bool):
    """Stabilized data-aware feature values plus backward intermediates."""
    y = x @ factor.T
    expo = y @ u.T - 0.5 * np.einsum("ij,ij->i", y, y)[:, None]
    offsets = np.full(x.shape[0], expo.max()) if shared_offset else expo.max(axis=1)
    vals = np.exp(expo - offsets[:, None]) / np.sqrt(u.shape[0])
    return vals, offsets, y


def _lfk_features(x: np.ndarray, omegas: np.ndarray, shared_offset: bool):
    expo = x @ omegas.T - 0.5 * np.einsum("ij,ij->i", x, x)[:, None]
    offsets = np.full(x.shape[0], expo.max()) if shared_offset else expo.max(axis=1)
    vals = np.exp(expo - offsets[:, None]) / np.sqrt(omegas.shape[0])
    return vals, offsets


def _attention_loss_common(phi_q, phi_k, v, target, eps):
    """Forward pass plus dL/dphi for the mean-squared attention objective."""
    b = phi_k.T @ v
    c = phi_k.sum(axis=0)
    numer = phi_q @ b
    den_raw = phi_q @ c
    den = np.maximum(den_raw, eps)
    out = numer / den[:, None]
    diff = out - target
    loss = float(np.mean(diff**2))
    g_out = 2.0 * diff / diff.size
    g_num = g_out / den[:, None]
    g_den = np.where(den_raw >= eps, -(g_out * out).sum(axis=1) / den, 0.0)
    d_phi_q = g_num @ b.T + np.outer(g_den, c)
    d_b = phi_q.T @ g_num
    d_c = phi_q.T @ g_den
    d_phi_k = v @ d_b.T + d_c[None, :]
    return loss, d_phi_q, d_phi_k


def attention_mse_dark(
    factor: np.ndarray,
    batch: TrainingBatch,
    u: np.ndarray,
    eps: float = DEFAULT_EPS,
    scale: float | None = None,
):
    """Loss and dL/dM for mean squared error against exact softmax attention."""
    if scale is None:
        scale = 1.0 / np.sqrt(batch.q.shape[1])
    root = np.sqrt(scale)
    qs, ks = batch.q * root, batch.k * root
    target = exact_attention(batch.q, batch.k, batch.v).values
    phi_q, _, y_q = _dark_features(qs, factor, u, shared_offset=False)
    phi_k, _, y_k = _dark_features(ks, factor, u, shared_offset=True)
    loss, d_phi_q, d_phi_k = _attention_loss_common(phi_q, phi_k, batch.v, target, eps)
    p_q = d_phi_q * phi_q
    p_k = d_phi_k * phi_k
    d_yq = p_q @ u - p_q.sum(axis=1)[:, None] * y_q
    d_yk = p_k @ u - p_k.sum(axis=1)[:, None] * y_k
    grad = d_yq.T @ qs + d_yk.T @ ks
    return loss, grad


def attention_mse_lfk(
    omegas: np.ndarray,
    batch: TrainingBatch,
    eps: float = DEFAULT_EPS,
    scale: float | None = None,
):
    """Loss and dL/dOmega for the learned-projection attention objective."""
    if scale is None:
        scale = 1.0 / np.sqrt(batch.q.shape[1])
    root = np.sqrt(scale)
    qs, ks = batch.q * root, batch.k * root
    target = exact_attention(batch.q, batch.k, batch.v).values
    phi_q, _ = _lfk_features(qs, omegas, shared_offset=False)
    phi_k, _ = _lfk_features(ks, omegas, shared_offset=True)
    loss, d_phi_q, d_phi_k = _attention_loss_common(phi_q, phi_k, batch.v, target, eps)
    grad = (d_phi_q * phi_q).T @ qs + (d_phi_k * phi_k).T @ ks
    return loss, grad


def kernel_mse_dark(factor: np.ndarray, batch: TrainingBatch, u: np.ndarray):
    """Loss and dL/dM for mean squared error of the data-aware kernel estimator.

    Targets are the exact softmax kernels exp(q_i^T k_i) of the paired batch
    rows; the estimator is the unweighted data-aware PRF mean.
    """
    q, k = batch.q, batch.k
    targets = np.exp(np.einsum("ij,ij->i", q, k))
    phi_q, off_q, y_q = _dark_features(q, factor, u, shared_offset=False)
    phi_k, off_k, y_k = _dark_features(k, factor, u, shared_offset=False)
    w = phi_q * phi_k
    s = w.sum(axis=1)
    with np.errstate(over="ignore"):
        scale_back = np.exp(off_q + off_k)
        kappa = scale_back * s
    diff = kappa - targets
    loss = float(np.mean(diff**2))
    g = 2.0 * diff / diff.size * scale_back
    gw = w * g[:, None]
    d_yq = gw @ u - gw.sum(axis=1)[:, None] * y_q
    d_yk = gw @ u - gw.sum(axis=1)[:, None] * y_k
    grad = d_yq.T @ q + d_yk.T @ k
    return loss, grad


def kernel_mse_lfk(omegas: np.ndarray, batch: TrainingBatch):
    q, k = batch.q, batch.k
    targets = np.exp(np.einsum("ij,ij->i", q, k))
    phi_q, off_q = _lfk_features(q, omegas, shared_offset=False)
    phi_k, off_k = _lfk_features(k, omegas, shared_offset=False)
    w = phi_q * phi_k
    with np.errstate(over="ignore"):
        scale_back = np.exp(off_q + off_k)
        kappa = scale_back * w.sum(axis=1)
    diff = kappa - targets
    loss = float(np.mean(diff**2))
    gw = w * (2.0 * diff / diff.size * scale_back)[:, None]
    grad = gw.T @ (q + k)
    return loss, grad


def _dark_objective(objective, factor, batch, u):
    if callable(objective):
        return objective(factor)
    if objective == "kernel_mse":
        return kernel_mse_dark(factor, batch, u)
    if objective == "attention_mse":
        return attention_mse_dark(factor, batch, u)
    raise ValueError(f"unknown objective {objective!r}")


def _lfk_objective(objective, omegas, batch):
    if callable(objective):
        return objective(omegas)
    if objective == "kernel_mse":
        return kernel_mse_lfk(omegas, batch)
    if objective == "attention_mse":
        return attention_mse_lfk(omegas, batch)
    raise ValueError(f"unknown objective {objective!r}")


def _run_descent(params, step_loss_grad, steps, lr, seed):
    """Shared fixed-lr descent loop with divergence bookkeeping."""
    traces: list[TrainTrace] = []
    initial_loss = None
    for t in range(steps):
        loss, grad = step_loss_grad(t, params)
        if initial_loss is None:
            initial_loss = abs(loss) if loss != 0 else 1.0
        diverged = (not np.isfinite(loss)) or loss > DIVERGENCE_FACTOR * initial_loss
        grad_norm = float(np.linalg.norm(grad)) if np.all(np.isfinite(grad)) else float("nan")
        traces.append(
            TrainTrace(step=t, loss=float(loss), grad_norm=grad_norm, lr=lr, seed=seed, diverged=diverged)
        )
        if diverged:
            break
        params = params - lr * grad
    return params, traces


def learn_M(
    source: GaussianBatchSource,
    objective: str | Callable,
    steps: int,
    lr: float,
    m: int,
    rng: SeededRng,
    init_factor: np.ndarray | None = None,
    resample_u: bool = True,
) -> tuple[CovarianceFactor, list[TrainTrace]]:
    """Gradient descent on the covariance factor M.

    Per step a fresh batch is drawn and, by default, fresh isotropic draws u
    (frozen-u mode reuses the step-0 draws; that is what gradient checks
    use).  Deterministic given the rng: two runs with identical
    configuration produce bitwise-identical traces.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    d = source.dim
    factor = np.eye(d) if init_factor is None else np.array(init_factor, dtype=np.float64)
    r = factor.shape[0]
    u_frozen = gaussian_sample(rng.derive(0).derive(1), m, r)

    def step_loss_grad(t, params):
        step_rng = rng.derive(t)
        batch = source.sample(step_rng.derive(0))
        u = gaussian_sample(step_rng.derive(1), m, r) if resample_u else u_frozen
        return _dark_objective(objective, params, batch, u)

    final, traces = _run_descent(factor, step_loss_grad, steps, lr, rng.seed)
    return CovarianceFactor(final), traces


def learn_projections_lfk(
    source: GaussianBatchSource,
    objective: str | Callable,
    steps: int,
    lr: float,
    m: int,
    rng: SeededRng,
    init_omegas: np.ndarray | None = None,
) -> tuple[np.ndarray, list[TrainTrace]]:
    """Gradient descent directly on the m x d projection rows (LFK baseline).

    Features keep the fixed isotropic normalizer exp(-0.5 ||x||^2) regardless
    of where the rows move; the projections are parameters, not samples.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    d = source.dim
    if init_omegas is None:
        omegas = gaussian_sample(rng.derive(_INIT_STREAM), m, d)
    else:
        omegas = np.array(init_omegas, dtype=np.float64)

    def step_loss_grad(t, params):
        batch = source.sample(rng.derive(t).derive(0))
        return _lfk_objective(objective, params, batch)

    return _run_descent(omegas, step_loss_grad, steps, lr, rng.seed)


def grad_check(
    factor: np.ndarray,
    batch: TrainingBatch,
    objective: str | Callable,
    u_draws: np.ndarray | None = None,
    fd_eps: float = 1e-5,
) -> float:
    """Max relative discrepancy between analytic and central-difference grads.

    The draws u are fixed and shared by the analytic and both finite-
    difference evaluations (common random numbers), so the comparison probes
    only the gradient algebra.
    """
    factor = np.array(factor, dtype=np.float64)
    if u_draws is None and not callable(objective):
        raise ValueError("u_draws are required for the named objectives")

    def evaluate(f):
        return _dark_objective(objective, f, batch, u_draws)

    _, grad = evaluate(factor)
    worst = 0.0
    for idx in np.ndindex(factor.shape):
        bump = np.zeros_like(factor)
        bump[idx] = fd_eps
        hi, _ = evaluate(factor + bump)
        lo, _ = evaluate(factor - bump)
        fd = (hi - lo) / (2.0 * fd_eps)
        worst = max(worst, abs(grad[idx] - fd) / max(1e-8, abs(fd)))
    return worst


def grad_check_projections(
    omegas: np.ndarray,
    batch: TrainingBatch,
    objective: str | Callable,
    fd_eps: float = 1e-5,
) -> float:
    """Finite-difference check of the learned-projection gradient."""
    omegas = np.array(omegas, dtype=np.float64)

    def evaluate(w):
        return _lfk_objective(objective, w, batch)

    _, grad = evaluate(omegas)
    worst = 0.0
    for idx in np.ndindex(omegas.shape):
        bump = np.zeros_like(omegas)
        bump[idx] = fd_eps
        hi, _ = evaluate(omegas + bump)
        lo, _ = evaluate(omegas - bump)
        fd = (hi - lo) / (2.0 * fd_eps)
        worst = max(worst, abs(grad[idx] - fd) / max(1e-8, abs(fd)))
    return worst


def save_factor(path, factor: np.ndarray | CovarianceFactor, seed: int = 0, step: int = 0) -> None:
    """Write a factor checkpoint: text header plus CSV rows of M.

    Floats are serialized with shortest-round-trip formatting so a
    save/load cycle is bit-exact.
    """
    matrix = factor.matrix if isinstance(factor, CovarianceFactor) else np.asarray(factor)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# factor rows={matrix.shape[0]} cols={matrix.shape[1]} seed={seed} step={step}\n")
        for row in matrix:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_factor(path) -> tuple[np.ndarray, dict]:
    """Read a factor checkpoint written by ``save_factor``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# factor"):
            raise ValueError("not a factor checkpoint")
        meta = dict(item.split("=") for item in header.split()[2:])
        rows = [
            [float(tok) for tok in line.strip().split(",")]
            for line in fh
            if line.strip()
        ]
    matrix = np.array(rows, dtype=np.float64)
    if matrix.shape != (int(meta["rows"]), int(meta["cols"])):
        raise ValueError("checkpoint shape does not match its header")
    return matrix, meta
