"""Deterministic Gaussian sampling on counter-based Philox streams.

Every draw is a pure function of a ``(seed, stream)`` pair: the Philox
bit generator is keyed with both integers, raw 64-bit counter output is
mapped to open-interval uniforms, and normal variates are produced by the
inverse-CDF transform (``scipy.special.ndtri``).  The transform is frozen:
changing it would silently break every recorded result, so treat it as part
of the on-disk format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 finalizer; a bijection on 64-bit integers."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class SeededRng:
    """Immutable handle for one Philox stream.

    Identical ``(seed, stream)`` pairs yield identical draw sequences on
    every platform and at every parallelism level; copies are free, so
    splitting work across trials or threads is done by deriving child
    streams rather than sharing state.
    """

    seed: int
    stream: int = 0

    def derive(self, index: int) -> "SeededRng":
        """Child stream ``index``; distinct indices give distinct streams."""
        child = _mix64((self.stream + (index + 1) * _GOLDEN) & _MASK64)
        return SeededRng(self.seed, child)

    def bit_generator(self) -> np.random.Philox:
        return np.random.Philox(key=[self.seed & _MASK64, self.stream & _MASK64])


def _raw_uint64(rng: SeededRng, n: int) -> np.ndarray:
    return rng.bit_generator().random_raw(n)


def uniform_open(rng: SeededRng, n: int) -> np.ndarray:
    """``n`` uniforms on the open interval (0, 1), never exactly 0 or 1."""
    raw = _raw_uint64(rng, n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def gaussian_sample(rng: SeededRng, n: int, d: int) -> np.ndarray:
    """An ``n x d`` matrix of iid standard normals.

    Deterministic given ``(rng.seed, rng.stream)``.  Variates come from the
    inverse normal CDF applied to open-interval uniforms, so exactly
    ``n * d`` counter words are consumed regardless of vectorization.
    """
    if n < 1 or d < 1:
        raise ValueError(f"need n, d >= 1, got n={n}, d={d}")
    return ndtri(uniform_open(rng, n * d)).reshape(n, d)


def gaussian_sample_cov(rng: SeededRng, n: int, factor: np.ndarray) -> np.ndarray:
    """``n`` iid draws from N(0, factor^T factor).

    Realized as ``omega = factor^T u`` with ``u`` standard normal in R^r.
    This realization is normative: it is what makes the draws differentiable
    in the factor, so do not replace it with e.g. a Cholesky of the
    covariance.
    """
    factor = np.asarray(factor, dtype=np.float64)
    if factor.ndim != 2:
        raise ValueError("factor must be a 2-d array (r x d)")
    r = factor.shape[0]
    u = gaussian_sample(rng, n, r)
    return u @ factor
