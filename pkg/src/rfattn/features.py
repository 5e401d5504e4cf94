"""Random feature maps for softmax-type kernels.

Three families: trigonometric features, positive random features (PRFs) of
the softmax kernel, and the data-aware PRF of the re-embedded kernel
exp(q^T Sigma k).  PRF exponents are stabilized per input row by a recorded
log-space offset; the unstabilized feature value is always recoverable as
``values * exp(offset)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SeededRng, gaussian_sample

EXP_GUARD = 700.0
GS_PIVOT_TOL = 1e-12
_GS_MAX_RESAMPLES = 8


class DegenerateBlockError(RuntimeError):
    """Gram-Schmidt pivot collapsed even after block resampling."""


class NonFiniteError(FloatingPointError):
    """A feature exponent exceeded the overflow guard after stabilization."""


@dataclass(frozen=True)
class ProjectionSet:
    """Random projection rows plus their sampling-law provenance.

    law is one of ``isotropic`` (rows iid N(0, I)), ``covariance`` (rows
    realized as factor^T u from isotropic u) or ``learned`` (rows are
    trained parameters, no sampling law claimed).
    """

    omegas: np.ndarray  # (m, d)
    law: str = "isotropic"
    orthogonal: bool = False
    seed: int | None = None
    stream: int | None = None
    factor: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.omegas.shape[0]

    @property
    def dim(self) -> int:
        return self.omegas.shape[1]


@dataclass(frozen=True)
class FeatureMatrix:
    """L x p feature values with per-row log-space stabilizer offsets.

    For PRF kinds every entry is strictly positive and
    ``unstabilized()[i, j] == values[i, j] * exp(offsets[i])`` recovers the
    mathematical feature value exactly.
    """

    values: np.ndarray  # (L, p)
    kind: str  # "prf" | "trig" | "data_aware" | "is_prf"
    offsets: np.ndarray  # (L,)

    def unstabilized(self) -> np.ndarray:
        return self.values * np.exp(self.offsets)[:, None]


def _gram_schmidt_rows(rows: np.ndarray) -> np.ndarray | None:
    """Orthonormalize rows in place order; None if a pivot degenerates."""
    q = rows.copy()
    for i in range(q.shape[0]):
        for j in range(i):
            q[i] -= (q[j] @ q[i]) * q[j]
        pivot = np.linalg.norm(q[i])
        if pivot < GS_PIVOT_TOL:
            return None
        q[i] /= pivot
    return q


def _orthogonal_block(rng: SeededRng, rows: int, d: int) -> np.ndarray:
    """One Gram-Schmidt block with chi(d)-rescaled row norms.

    The rescale restores the marginal N(0, I_d) row law: the direction is
    uniform on the sphere and the norm is drawn as the norm of a fresh
    standard Gaussian vector, which is chi(d) exactly.
    """
    for attempt in range(_GS_MAX_RESAMPLES):
        g = gaussian_sample(rng.derive(2 * attempt), rows, d)
        basis = _gram_schmidt_rows(g)
        if basis is not None:
            norm_draws = gaussian_sample(rng.derive(2 * attempt + 1), rows, d)
            norms = np.sqrt(np.einsum("ij,ij->i", norm_draws, norm_draws))
            return basis * norms[:, None]
    raise DegenerateBlockError(
        f"Gram-Schmidt pivot below {GS_PIVOT_TOL} in {_GS_MAX_RESAMPLES} resamples"
    )


def draw_projections(
    rng: SeededRng,
    m: int,
    d: int,
    law: str = "isotropic",
    orthogonal: bool = False,
    factor: np.ndarray | None = None,
) -> ProjectionSet:
    """Draw m projection rows in R^d under the requested law.

    Orthogonality applies only to the isotropic law: rows are produced in
    blocks of at most d, each block orthogonalized and chi(d)-rescaled;
    cross-block rows are independent.  A trailing partial block is
    orthogonalized the same way.
    """
    if m < 1 or d < 1:
        raise ValueError("need m, d >= 1")
    if law == "isotropic":
        if factor is not None:
            raise ValueError("isotropic law takes no factor")
        if orthogonal:
            blocks = []
            for b, start in enumerate(range(0, m, d)):
                rows = min(d, m - start)
                blocks.append(_orthogonal_block(rng.derive(b), rows, d))
            omegas = np.vstack(blocks)
        else:
            omegas = gaussian_sample(rng, m, d)
    elif law == "covariance":
        if factor is None:
            raise ValueError("covariance law requires a factor")
        if orthogonal:
            raise ValueError("orthogonality is only defined for the isotropic law")
        factor = np.asarray(factor, dtype=np.float64)
        u = gaussian_sample(rng, m, factor.shape[0])
        omegas = u @ factor
    else:
        raise ValueError(f"unknown law {law!r}")
    return ProjectionSet(
        omegas=omegas,
        law=law,
        orthogonal=orthogonal,
        seed=rng.seed,
        stream=rng.stream,
        factor=None if factor is None else factor.copy(),
    )


def _prf_values(
    x: np.ndarray, omegas: np.ndarray, shared_offset: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Stabilized exp(omega_j^T x_i - 0.5 ||x_i||^2 - offset_i) / sqrt(m).

    offset_i defaults to the row maximum of the exponent; with
    ``shared_offset`` a single global maximum is used for every row (needed
    when rows must keep their relative magnitudes, e.g. attention keys).
    """
    m = omegas.shape[0]
    z = x @ omegas.T
    half_sq = 0.5 * np.einsum("ij,ij->i", x, x)
    expo = z - half_sq[:, None]
    if shared_offset:
        offsets = np.full(x.shape[0], expo.max())
    else:
        offsets = expo.max(axis=1)
    # max subtraction bounds the stabilized exponents at 0; overflow can only
    # hide in the recorded offsets, which must stay reconstructable
    if offsets.size and offsets.max() > EXP_GUARD:
        raise NonFiniteError("feature offset exceeds overflow guard")
    shifted = expo - offsets[:, None]
    return np.exp(shifted) / np.sqrt(m), offsets


def prf_map(x: np.ndarray, omega_set: ProjectionSet, shared_offset: bool = False) -> FeatureMatrix:
    """Positive random features of the softmax kernel exp(q^T k).

    Requires isotropic (or trained, for the learned-projection baseline)
    projection rows; the normalizer is always the isotropic 0.5 ||x||^2.
    """
    if omega_set.law not in ("isotropic", "learned"):
        raise ValueError(f"prf_map requires isotropic projections, got {omega_set.law!r}")
    x = np.asarray(x, dtype=np.float64)
    values, offsets = _prf_values(x, omega_set.omegas, shared_offset=shared_offset)
    return FeatureMatrix(values=values, kind="prf", offsets=offsets)


def trig_map(x: np.ndarray, omega_set: ProjectionSet, target: str = "gaussian") -> FeatureMatrix:
    """Trigonometric features of the Gaussian or softmax kernel.

    Width is 2m: [cos(omega_j^T x)..., sin(omega_j^T x)...] / sqrt(m).  The
    Gaussian target uses h(x) = 1; the softmax target's h(x) =
    exp(0.5 ||x||^2) is carried in the offsets.
    """
    if omega_set.law not in ("isotropic", "learned"):
        raise ValueError(f"trig_map requires isotropic projections, got {omega_set.law!r}")
    if target not in ("gaussian", "softmax"):
        raise ValueError(f"unknown target {target!r}")
    x = np.asarray(x, dtype=np.float64)
    z = x @ omega_set.omegas.T
    values = np.hstack([np.cos(z), np.sin(z)]) / np.sqrt(omega_set.m)
    if target == "softmax":
        offsets = 0.5 * np.einsum("ij,ij->i", x, x)
    else:
        offsets = np.zeros(x.shape[0])
    return FeatureMatrix(values=values, kind="trig", offsets=offsets)


def data_aware_prf_map(
    x: np.ndarray,
    u_draws: np.ndarray,
    factor: np.ndarray,
    shared_offset: bool = False,
) -> FeatureMatrix:
    """PRFs of the data-aware kernel exp(q^T Sigma k), Sigma = factor^T factor.

    The projections omega_j = factor^T u_j are composed internally from the
    supplied isotropic draws, and the map is evaluated in the re-embedded
    coordinates x_tilde = factor x, so with factor = I the output matches
    ``prf_map`` on the same draws bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    factor = np.asarray(factor, dtype=np.float64)
    u_draws = np.asarray(u_draws, dtype=np.float64)
    if u_draws.shape[1] != factor.shape[0]:
        raise ValueError(
            f"draw width {u_draws.shape[1]} does not match factor rank {factor.shape[0]}"
        )
    x_tilde = x @ factor.T
    values, offsets = _prf_values(x_tilde, u_draws, shared_offset=shared_offset)
    return FeatureMatrix(values=values, kind="data_aware", offsets=offsets)
