"""Exact softmax attention, O(L m d) random-feature attention, and baselines.

The random-feature path computes Q'(K'^T V) / Q'(K'^T 1) and never
materializes an L x L matrix; a naive reference path that does materialize it
is kept for the associativity check.  Stabilizer offsets are per query row
and shared (global) across key rows, so they cancel exactly in the
normalized output.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix, data_aware_prf_map, draw_projections, prf_map, trig_map
from .kernels import SigmaGeometry
from .linalg import cholesky_psd
from .rng import SeededRng, gaussian_sample, uniform_open

DEFAULT_EPS = 1e-8


class DenominatorUnderflow(UserWarning):
    """A raw attention denominator fell below the epsilon guard."""


@dataclass(frozen=True)
class AttentionOutput:
    """Attention values (L x d) and pre-normalization row denominators."""

    values: np.ndarray
    denominators: np.ndarray


@dataclass(frozen=True)
class RfMap:
    """Feature-map configuration for random-feature attention.

    kinds:
      * ``prf``        isotropic positive features of the softmax kernel
                       (orthogonal=True gives the ORF variant)
      * ``trig``       trigonometric features (``trig_target`` picks the
                       kernel; attention wants "softmax")
      * ``data_aware`` positive features of exp(q^T Sigma k) with
                       Sigma = factor^T factor, draws composed as factor^T u
      * ``is_prf``     softmax-kernel features carrying sqrt importance
                       weights for draws from the Gaussian ``proposal`` --
                       unbiased for softmax attention at any proposal
    """

    kind: str
    m: int
    orthogonal: bool = False
    trig_target: str = "softmax"
    factor: np.ndarray | None = None
    proposal: SigmaGeometry | None = None


def exact_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float | None = None
) -> AttentionOutput:
    """Row-softmax of scale * Q K^T applied to V, with per-row max subtraction.

    Scores are processed in query blocks so the L x L matrix never exceeds a
    fixed memory budget; the arithmetic is still O(L^2 d).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    n = q.shape[0]
    out = np.empty((n, v.shape[1]))
    denoms = np.empty(n)
    # fixed row tile: keeps the score panel cache-sized at every L
    block = 64
    for start in range(0, n, block):
        stop = min(start + block, n)
        scores = scale * (q[start:stop] @ k.T)
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        row_sums = scores.sum(axis=1)
        out[start:stop] = (scores @ v) / row_sums[:, None]
        denoms[start:stop] = row_sums
    return AttentionOutput(values=out, denominators=denoms)


def is_prf_map(
    x: np.ndarray,
    omegas: np.ndarray,
    proposal: SigmaGeometry,
    shared_offset: bool = False,
) -> FeatureMatrix:
    """Softmax-kernel PRFs with the importance factor folded into the features.

    For draws omega_j ~ N(0, Sigma_psi) the factor p_I/p_psi of the weighted
    estimator splits as a per-feature sqrt-weight, so Q'K'^T stays an
    unbiased estimate of the softmax kernel matrix while the proposal shapes
    the variance.
    """
    from .features import _prf_values

    values, offsets = _prf_values(np.asarray(x, dtype=np.float64), omegas, shared_offset)
    half_log_w = -0.5 * proposal.log_density_ratio(omegas)
    return FeatureMatrix(values=values * np.exp(half_log_w), kind="is_prf", offsets=offsets)


class _FeatureMapper:
    """Drawn projections for one attention call, applied per row block.

    Query rows keep per-row offsets (they cancel in the normalized output);
    key rows get a shared offset so their relative magnitudes survive the
    K'^T reduction.  Trig features carry their h(x) factor explicitly on the
    key side, so their key offsets are identically zero.
    """

    def __init__(self, rfmap: RfMap, rng: SeededRng, d: int):
        self.rfmap = rfmap
        if rfmap.kind in ("prf", "trig"):
            self.omega_set = draw_projections(rng, rfmap.m, d, orthogonal=rfmap.orthogonal)
        elif rfmap.kind == "data_aware":
            if rfmap.factor is None:
                raise ValueError("data_aware map requires a factor")
            self.factor = np.asarray(rfmap.factor, dtype=np.float64)
            self.u_draws = gaussian_sample(rng, rfmap.m, self.factor.shape[0])
        elif rfmap.kind == "is_prf":
            if rfmap.proposal is None:
                raise ValueError("is_prf map requires a proposal geometry")
            u = gaussian_sample(rng, rfmap.m, d)
            self.omegas = u @ cholesky_psd(rfmap.proposal.sigma).T
            self.half_log_w = -0.5 * rfmap.proposal.log_density_ratio(self.omegas)
        else:
            raise ValueError(f"unknown map kind {rfmap.kind!r}")

    def key_block(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        """Stabilized key-side features plus the block's scalar log offset."""
        kind = self.rfmap.kind
        if kind == "prf":
            feats = prf_map(x, self.omega_set, shared_offset=True)
            return feats.values, float(feats.offsets[0])
        if kind == "trig":
            feats = trig_map(x, self.omega_set, target=self.rfmap.trig_target)
            return feats.unstabilized(), 0.0
        if kind == "data_aware":
            feats = data_aware_prf_map(x, self.u_draws, self.factor, shared_offset=True)
            return feats.values, float(feats.offsets[0])
        feats = is_prf_map(x, self.omegas, self.rfmap.proposal, shared_offset=True)
        return feats.values, float(feats.offsets[0])

    def query_block(self, x: np.ndarray) -> np.ndarray:
        kind = self.rfmap.kind
        if kind == "prf":
            return prf_map(x, self.omega_set).values
        if kind == "trig":
            return trig_map(x, self.omega_set, target=self.rfmap.trig_target).values
        if kind == "data_aware":
            return data_aware_prf_map(x, self.u_draws, self.factor).values
        return is_prf_map(x, self.omegas, self.rfmap.proposal).values


def _draw_map_features(
    q: np.ndarray, k: np.ndarray, rfmap: RfMap, rng: SeededRng
) -> tuple[np.ndarray, np.ndarray]:
    """Full query/key feature value matrices (reference path, small L only)."""
    mapper = _FeatureMapper(rfmap, rng, q.shape[1])
    k_vals, _ = mapper.key_block(k)
    return mapper.query_block(q), k_vals


def _guard_denominators(raw: np.ndarray, eps: float) -> np.ndarray:
    low = raw < eps
    if np.any(low):
        warnings.warn(
            f"{int(low.sum())} attention denominator(s) below eps={eps:g}; guarded",
            DenominatorUnderflow,
            stacklevel=3,
        )
    return np.maximum(raw, eps)


def rf_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    rfmap: RfMap,
    rng: SeededRng,
    eps: float = DEFAULT_EPS,
    scale: float | None = None,
) -> AttentionOutput:
    """Random-feature attention via the factored order Q'((K')^T V).

    Queries and keys absorb the attention scaling before mapping (each side
    is multiplied by scale^(1/2), default scale 1/sqrt(d)).  Denominators
    below ``eps`` are reported via DenominatorUnderflow and then guarded.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    root = np.sqrt(scale)
    mapper = _FeatureMapper(rfmap, rng, q.shape[1])

    # both reductions stream over fixed row tiles so the feature panels stay
    # cache-sized at every L; per-tile key offsets are merged exactly via
    # exp(offset_t - offset_max) scaling of the partial sums
    tile = 512
    ks = k * root
    parts = []
    for start in range(0, ks.shape[0], tile):
        block, offset = mapper.key_block(ks[start : start + tile])
        parts.append((offset, block.T @ v[start : start + tile], block.sum(axis=0)))
    offset_max = max(p[0] for p in parts)
    kv = np.zeros((parts[0][1].shape[0], v.shape[1]))
    k_sum = np.zeros(parts[0][2].shape[0])
    for offset, kv_part, sum_part in parts:
        rescale = np.exp(offset - offset_max)
        kv += rescale * kv_part
        k_sum += rescale * sum_part

    qs = q * root
    numer = np.empty((qs.shape[0], v.shape[1]))
    denom_raw = np.empty(qs.shape[0])
    for start in range(0, qs.shape[0], tile):
        q_block = mapper.query_block(qs[start : start + tile])
        numer[start : start + tile] = q_block @ kv
        denom_raw[start : start + tile] = q_block @ k_sum
    denom = _guard_denominators(denom_raw, eps)
    return AttentionOutput(values=numer / denom[:, None], denominators=denom)


def naive_rf_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    rfmap: RfMap,
    rng: SeededRng,
    eps: float = DEFAULT_EPS,
    scale: float | None = None,
) -> AttentionOutput:
    """Reference path that materializes normalize(Q'K'^T) V explicitly.

    Draws are identical to ``rf_attention`` given the same rng, so the two
    paths differ only by floating-point reassociation.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    root = np.sqrt(scale)
    q_vals, k_vals = _draw_map_features(q * root, k * root, rfmap, rng)
    weights = q_vals @ k_vals.T
    denom = _guard_denominators(weights.sum(axis=1), eps)
    return AttentionOutput(values=(weights @ v) / denom[:, None], denominators=denom)


def baseline_attention(kind: str, v: np.ndarray, rng: SeededRng | None = None) -> AttentionOutput:
    """Trivial baselines: iid-uniform random weights or constant 1/L weights."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    if kind == "constant":
        weights = np.full((n, n), 1.0 / n)
    elif kind == "uniform_random":
        if rng is None:
            raise ValueError("uniform_random baseline needs an rng")
        weights = uniform_open(rng, n * n).reshape(n, n)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    denom = weights.sum(axis=1)
    return AttentionOutput(values=(weights @ v) / denom[:, None], denominators=denom)
