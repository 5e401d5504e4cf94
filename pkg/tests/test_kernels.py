"""Exact kernels, Mahalanobis geometry, and the estimator unbiasedness triple."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rfattn.kernels import (
    InvalidWeightError,
    KernelOverflowError,
    SigmaGeometry,
    SingularSigmaError,
    importance_estimate,
    importance_weight,
    mahalanobis_dist2,
    prf_estimate,
    proposal_weights,
    sigma_estimate,
    sigma_estimate_from_omegas,
    sigma_kernel_exact,
    softmax_kernel_exact,
)
from rfattn.features import ProjectionSet, draw_projections
from rfattn.rng import SeededRng, gaussian_sample

_small_vec = arrays(
    np.float64, 3, elements=st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)
)


class TestExactKernels:
    def test_softmax_kernel_trivial_values(self):
        assert softmax_kernel_exact(np.zeros(2), np.zeros(2)) == 1.0
        assert softmax_kernel_exact(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0
        assert softmax_kernel_exact(np.array([1.0, 1.0]), np.array([1.0, -1.0])) == 1.0

    def test_softmax_kernel_overflow(self):
        with pytest.raises(KernelOverflowError):
            softmax_kernel_exact(np.array([30.0]), np.array([30.0]))

    def test_sigma_kernel_reductions(self):
        q, k = np.array([0.3, -0.7]), np.array([0.2, 0.4])
        assert sigma_kernel_exact(q, k, np.eye(2)) == softmax_kernel_exact(q, k)
        assert sigma_kernel_exact(q, k, np.zeros((2, 2))) == 1.0
        assert sigma_kernel_exact(
            np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.diag([2.0, 1.0])
        ) == pytest.approx(np.exp(2.0), rel=1e-15)

    def test_factor_identity(self):
        rng = SeededRng(1)
        m_factor = gaussian_sample(rng.derive(0), 4, 4)
        q = gaussian_sample(rng.derive(1), 1, 4)[0] * 0.3
        k = gaussian_sample(rng.derive(2), 1, 4)[0] * 0.3
        lhs = sigma_kernel_exact(q, k, m_factor.T @ m_factor)
        rhs = softmax_kernel_exact(m_factor @ q, m_factor @ k)
        assert abs(lhs - rhs) <= 1e-12 * abs(rhs)


class TestMahalanobis:
    def test_zero_distance(self):
        x = np.array([1.0, -2.0])
        assert mahalanobis_dist2(x, x, np.eye(2)) == 0.0

    def test_inverse_covariance_eigen_form(self):
        # Sigma = Lambda^{-1} with Lambda = diag(4, 1), x - y = (2, 2):
        # sum delta_i^2 / lambda_i = 4/4 + 4/1 = 5
        sigma = np.diag([0.25, 1.0])
        assert mahalanobis_dist2(np.array([2.0, 2.0]), np.zeros(2), sigma) == pytest.approx(5.0)

    def test_identity_is_euclidean(self):
        x, y = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
        assert mahalanobis_dist2(x, y, np.eye(2)) == pytest.approx(np.sum((x - y) ** 2))

    @settings(max_examples=60, deadline=None)
    @given(_small_vec, _small_vec, _small_vec)
    def test_polarization_identity(self, x, y, row):
        sigma = np.outer(row, row) + 0.5 * np.eye(3)
        lhs = x @ sigma @ y
        rhs = 0.5 * (
            mahalanobis_dist2(x, np.zeros(3), sigma)
            + mahalanobis_dist2(y, np.zeros(3), sigma)
            - mahalanobis_dist2(x, y, sigma)
        )
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


class TestImportanceWeight:
    def test_identity_sigma_weight_is_one(self):
        assert importance_weight(np.array([0.7, -0.3]), np.eye(2)) == pytest.approx(1.0)

    def test_scalar_sigma_at_origin(self):
        assert importance_weight(np.array([0.0]), np.array([[4.0]])) == pytest.approx(0.5)

    def test_scalar_sigma_hand_value(self):
        # ratio of N(0,4) to N(0,1) densities at omega = 2: (1/2) e^{1.5}
        w = importance_weight(np.array([2.0]), np.array([[4.0]]))
        assert w == pytest.approx(0.5 * np.exp(1.5), rel=1e-12)

    def test_singular_sigma_rejected(self):
        geom = SigmaGeometry(np.array([[1.0, 0.0]]))  # rank 1 in d = 2
        assert not geom.valid
        with pytest.raises(SingularSigmaError):
            importance_weight(np.array([1.0, 1.0]), geom)


class TestEstimators:
    def test_prf_estimate_origin_is_exactly_one(self):
        om = draw_projections(SeededRng(2), 37, 3)
        assert prf_estimate(np.zeros(3), np.zeros(3), om).value == 1.0

    def test_prf_estimate_single_term_closed_form(self):
        om = ProjectionSet(omegas=np.array([[0.5, -1.0]]), law="isotropic")
        q, k = np.array([1.0, 0.0]), np.array([0.0, 2.0])
        expected = np.exp(0.5 - 0.5 + (-2.0) - 2.0)
        assert prf_estimate(q, k, om).value == pytest.approx(expected, rel=1e-15)

    def test_importance_estimate_unit_weights_match_prf(self):
        rng = SeededRng(3)
        om = draw_projections(rng.derive(0), 128, 3)
        q = gaussian_sample(rng.derive(1), 1, 3)[0] * 0.4
        k = gaussian_sample(rng.derive(2), 1, 3)[0] * 0.4
        a = prf_estimate(q, k, om)
        b = importance_estimate(q, k, om, lambda w: np.ones(w.shape[0]))
        assert a.value == b.value

    def test_importance_estimate_rejects_bad_weights(self):
        om = draw_projections(SeededRng(4), 8, 2)
        with pytest.raises(InvalidWeightError):
            importance_estimate(np.zeros(2), np.zeros(2), om, lambda w: -np.ones(w.shape[0]))
        with pytest.raises(InvalidWeightError):
            importance_estimate(
                np.zeros(2), np.zeros(2), om, lambda w: np.full(w.shape[0], np.nan)
            )

    def test_sigma_estimate_identity_reduces_to_prf_bitwise(self):
        rng = SeededRng(5)
        u = gaussian_sample(rng.derive(0), 64, 3)
        q = gaussian_sample(rng.derive(1), 1, 3)[0] * 0.5
        k = gaussian_sample(rng.derive(2), 1, 3)[0] * 0.5
        a = sigma_estimate(q, k, u, np.eye(3))
        b = prf_estimate(q, k, ProjectionSet(omegas=u, law="isotropic"))
        assert a.value == b.value

    def test_sigma_estimate_origin_is_one(self):
        u = gaussian_sample(SeededRng(6), 16, 2)
        assert sigma_estimate(np.zeros(2), np.zeros(2), u, np.eye(2) * 0.7).value == 1.0

    def test_positivity_of_samples(self):
        rng = SeededRng(7)
        om = draw_projections(rng.derive(0), 256, 4)
        q = gaussian_sample(rng.derive(1), 1, 4)[0]
        k = gaussian_sample(rng.derive(2), 1, 4)[0]
        est = prf_estimate(q, k, om, keep_samples=True)
        assert np.all(est.samples > 0)
        assert est.value == pytest.approx(est.samples.mean())


class TestUnbiasednessTriple:
    """Means of all three estimators match their exact kernels at 3 SE."""

    @pytest.mark.parametrize("seed", range(20))
    def test_triple_matches_exact_kernels(self, seed):
        rng = SeededRng(1000 + seed)
        d, m = 4, 40000
        q = gaussian_sample(rng.derive(0), 1, d)[0] * 0.5
        k = gaussian_sample(rng.derive(1), 1, d)[0] * 0.5
        g = gaussian_sample(rng.derive(2), d, d) * 0.4
        geom = SigmaGeometry(g)

        def band(est, target):
            se = est.samples.std(ddof=1) / np.sqrt(est.samples.size)
            return abs(est.value - target) < 3.0 * max(se, 1e-12)

        om = draw_projections(rng.derive(3), m, d)
        assert band(prf_estimate(q, k, om, keep_samples=True), softmax_kernel_exact(q, k))

        # proposal N(0, 2 I), weights p_I / psi
        wide = SigmaGeometry(np.sqrt(2.0) * np.eye(d))
        draws = gaussian_sample(rng.derive(4), m, d) * np.sqrt(2.0)
        est_is = importance_estimate(
            q, k, draws, lambda w: proposal_weights(w, wide), keep_samples=True
        )
        assert band(est_is, softmax_kernel_exact(q, k))

        u = gaussian_sample(rng.derive(5), m, d)
        est_sig = sigma_estimate(q, k, u, g, keep_samples=True)
        assert band(est_sig, sigma_kernel_exact(q, k, geom.sigma))


class TestSamplingEquivalence:
    def test_sigma_sampled_and_weighted_isotropic_agree(self):
        """Unweighted draws from N(0, Sigma) and w_Sigma-weighted draws from
        N(0, I) estimate the same kernel: means agree within joint 3 SE and
        both sit within 3 SE of exp(q^T Sigma k)."""
        rng = SeededRng(2024)
        d, m, trials = 3, 64, 1200
        g = gaussian_sample(rng.derive(0), d, d) * 0.5
        geom = SigmaGeometry(g)
        q = gaussian_sample(rng.derive(1), 1, d)[0] * 0.5
        k = gaussian_sample(rng.derive(2), 1, d)[0] * 0.5
        exact = sigma_kernel_exact(q, k, geom.sigma)
        a = np.empty(trials)
        b = np.empty(trials)
        for t in range(trials):
            u = gaussian_sample(rng.derive(3).derive(t), m, d)
            a[t] = sigma_estimate(q, k, u, g).value
            om = gaussian_sample(rng.derive(4).derive(t), m, d)
            b[t] = sigma_estimate_from_omegas(
                q, k, om, geom, weight_fn=lambda w: np.exp(geom.log_density_ratio(w))
            ).value
        se = np.sqrt(a.var(ddof=1) / trials + b.var(ddof=1) / trials)
        assert abs(a.mean() - b.mean()) < 3.0 * se
        assert abs(a.mean() - exact) < 3.0 * a.std(ddof=1) / np.sqrt(trials)
        assert abs(b.mean() - exact) < 3.0 * b.std(ddof=1) / np.sqrt(trials)

    def test_per_draw_values_are_not_pointwise_equal(self):
        # the equivalence is in expectation only
        rng = SeededRng(99)
        g = 0.5 * np.eye(2)
        geom = SigmaGeometry(g)
        u = gaussian_sample(rng.derive(0), 8, 2)
        a = sigma_estimate(np.ones(2) * 0.1, np.ones(2) * 0.2, u, g, keep_samples=True)
        b = sigma_estimate_from_omegas(
            np.ones(2) * 0.1,
            np.ones(2) * 0.2,
            gaussian_sample(rng.derive(1), 8, 2),
            geom,
            weight_fn=lambda w: np.exp(geom.log_density_ratio(w)),
            keep_samples=True,
        )
        assert not np.allclose(a.samples, b.samples)
