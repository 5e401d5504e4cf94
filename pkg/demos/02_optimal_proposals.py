"""Variance-optimal importance sampling for PRF kernel estimation.

Shows the closed-form optimal proposal covariance for Gaussian inputs, the
d=1 variance objective computed by quadrature (with its divergence region),
and a Monte Carlo confirmation that sampling from the optimal proposal
beats isotropic sampling.
"""

import numpy as np

from rfattn import (
    GaussianInputSpec,
    NonIntegrableError,
    gaussian_B,
    optimal_sigma_star,
    pair_variance_quadrature,
    variance_objective_quadrature,
)
from rfattn.linalg import cholesky_psd
from rfattn.rng import SeededRng, gaussian_sample
from rfattn.sampling import GaussianProposalEstimator, IsotropicPrfEstimator, mc_variance


def main():
    print("== the optimal Gaussian proposal ==")
    for lam in (0.0, 0.1, 0.25, 0.45):
        spec = GaussianInputSpec.isotropic(lam, 1)
        star = optimal_sigma_star(spec)[0, 0]
        print(f"  input variance {lam:.2f}  ->  proposal variance {star:.3f}")
    spec = GaussianInputSpec.from_covariance(np.diag([0.1, 0.4]))
    print(f"  diag(0.1, 0.4) -> diag{tuple(np.round(np.diag(optimal_sigma_star(spec)), 3))}")

    print("\n== the averaged second-moment factor B at lambda = 0.25 ==")
    spec1 = GaussianInputSpec.isotropic(0.25, 1)
    for w in (0.0, 0.5, 1.0, 2.0):
        print(f"  B({w:.1f}) = {gaussian_B(np.array([w]), spec1):.4f}")

    print("\n== variance objective over proposal variances (lambda = 0.25) ==")
    print("  note the divergence region: the isotropic proposal (s^2 = 1) has an")
    print("  INFINITE expected variance once lambda exceeds 1/6")
    for s2 in (1.0, 1.6, 2.0, 3.0, 5.0, 9.0):
        try:
            v = variance_objective_quadrature(s2, 0.25)
            print(f"  s^2 = {s2:<4} V = {v:.4f}")
        except NonIntegrableError:
            print(f"  s^2 = {s2:<4} V = divergent")

    grid = np.arange(0.5, 10.0, 0.05)
    vals = []
    for s2 in grid:
        try:
            vals.append(variance_objective_quadrature(float(s2), 0.25))
        except NonIntegrableError:
            vals.append(np.inf)
    print(f"  grid argmin sits at s^2 = {grid[int(np.argmin(vals))]:.2f} (theory: 3.0)")

    print("\n== Monte Carlo confirmation on a fixed pair list ==")
    lam_mat = np.diag([0.3, 0.1])
    spec2 = GaussianInputSpec.from_covariance(lam_mat)
    star = optimal_sigma_star(spec2)
    rng = SeededRng(0)
    factor = cholesky_psd(lam_mat).T
    raw = gaussian_sample(rng.derive(999), 400, 4)
    pairs = [(row[:2] @ factor, row[2:] @ factor) for row in raw[:20]]
    iso = mc_variance(IsotropicPrfEstimator(), pairs, 64, 2000, rng)
    opt = mc_variance(GaussianProposalEstimator(star, "psi_star"), pairs, 64, 2000, rng)
    print(f"  isotropic sampling: variance {iso.variance:.5f} +- {iso.variance_se:.5f}")
    print(f"  optimal proposal:   variance {opt.variance:.5f} +- {opt.variance_se:.5f}")
    print(f"  reduction factor:   {iso.variance / opt.variance:.2f}x")

    print("\n  per-pair variances by quadrature (the optimal proposal wins in")
    print("  expectation, not pointwise: small q + k favors isotropic draws):")
    for q, k in ((0.4, -0.2), (0.8, 0.7)):
        v_iso = pair_variance_quadrature(q, k, 1.0, 64)
        v_opt = pair_variance_quadrature(q, k, 3.0, 64)
        print(f"    (q, k) = ({q:+.1f}, {k:+.1f}):  isotropic {v_iso:.3e}   optimal {v_opt:.3e}")


if __name__ == "__main__":
    main()
