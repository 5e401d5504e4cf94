"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and timings.  Every tolerance is fixed here, not configurable; the
Monte Carlo protocols pin their seeds so the suite is deterministic.
"""

import time
import warnings

import numpy as np
import pytest

import rfattn
from rfattn import (
    GaussianInputSpec,
    RfMap,
    SigmaGeometry,
    exact_attention,
    naive_rf_attention,
    optimal_sigma_star,
    pair_variance_quadrature,
    prf_estimate,
    rf_attention,
    sigma_estimate,
    sigma_estimate_from_omegas,
    sigma_kernel_exact,
    softmax_kernel_exact,
    variance_objective_quadrature,
)
from rfattn.attention import DenominatorUnderflow
from rfattn.features import ProjectionSet
from rfattn.harness import (
    ErrorBudgetConfig,
    GradCheckConfig,
    StabilityConfig,
    TimingConfig,
    ToyTrainConfig,
    VarianceSweepConfig,
    parse_lam_spec,
    run_error_vs_budget,
    run_grad_check,
    run_stability_sweep,
    run_timing_bench,
    run_toy_train,
    run_variance_sweep,
)
from rfattn.learning import plugin_whitening
from rfattn.linalg import cholesky_psd
from rfattn.rng import SeededRng, gaussian_sample, gaussian_sample_cov
from rfattn.sampling import (
    GaussianProposalEstimator,
    InvalidProposalError,
    IsotropicPrfEstimator,
    NonIntegrableError,
    mc_variance,
)

warnings.filterwarnings("ignore", category=DenominatorUnderflow)


def _report(number: int, description: str, ok: bool, elapsed: float, budget: float) -> None:
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"criterion {number:02d} {status} ({elapsed:.1f}s of {budget:.0f}s budget): {description}")
    assert ok, f"criterion {number}: {description}"
    assert elapsed < budget, f"criterion {number}: runtime {elapsed:.1f}s over budget {budget}s"


def _bounded_pair(rng: SeededRng, d: int, cap: float = 1.0):
    """A (q, k) pair with both norms at most cap."""
    q = gaussian_sample(rng.derive(0), 1, d)[0]
    k = gaussian_sample(rng.derive(1), 1, d)[0]
    q *= min(1.0, cap / np.linalg.norm(q))
    k *= min(1.0, cap / np.linalg.norm(k))
    return q, k


def test_criterion_01_prf_unbiasedness():
    """Unbiasedness of the plain PRF softmax-kernel estimator at 3 SE."""
    start = time.perf_counter()
    ok = True
    for i in range(20):
        rng = SeededRng(10 + i)
        q, k = _bounded_pair(rng.derive(0), 4)
        omegas = ProjectionSet(omegas=gaussian_sample(rng.derive(1), 200000, 4), law="isotropic")
        est = prf_estimate(q, k, omegas, keep_samples=True)
        se = est.samples.std(ddof=1) / np.sqrt(est.m)
        ok &= abs(est.value - softmax_kernel_exact(q, k)) < 3.0 * se
    _report(1, "PRF estimator mean within 3 SE of exp(q^T k), 20 pairs", ok, time.perf_counter() - start, 10.0)


def test_criterion_02_data_aware_unbiasedness():
    """Data-aware unbiasedness for exp(q^T Sigma k), 5 random PSD geometries."""
    start = time.perf_counter()
    ok = True
    for s in range(5):
        rng = SeededRng(40 + s)
        factor = gaussian_sample(rng.derive(0), 4, 4) * 0.4
        sigma = factor.T @ factor
        for p in range(4):
            prng = rng.derive(1 + p)
            q, k = _bounded_pair(prng, 4)
            u = gaussian_sample(prng.derive(2), 200000, 4)
            est = sigma_estimate(q, k, u, factor, keep_samples=True)
            se = est.samples.std(ddof=1) / np.sqrt(est.m)
            ok &= abs(est.value - sigma_kernel_exact(q, k, sigma)) < 3.0 * se
    _report(2, "sigma estimator mean within 3 SE of exp(q^T Sigma k)", ok, time.perf_counter() - start, 10.0)


def test_criterion_03_sampling_equivalence():
    """Sigma-sampled and w_Sigma-weighted isotropic estimators agree."""
    start = time.perf_counter()
    rng = SeededRng(77)
    d, m, trials = 3, 64, 1200
    factor = gaussian_sample(rng.derive(0), d, d) * 0.5
    geom = SigmaGeometry(factor)
    q, k = _bounded_pair(rng.derive(1), d)
    exact = sigma_kernel_exact(q, k, geom.sigma)
    a = np.empty(trials)
    b = np.empty(trials)
    for t in range(trials):
        u = gaussian_sample(rng.derive(2).derive(t), m, d)
        a[t] = sigma_estimate(q, k, u, factor).value
        om = gaussian_sample(rng.derive(3).derive(t), m, d)
        b[t] = sigma_estimate_from_omegas(
            q, k, om, geom, weight_fn=lambda w: np.exp(geom.log_density_ratio(w))
        ).value
    joint_se = np.sqrt(a.var(ddof=1) / trials + b.var(ddof=1) / trials)
    ok = abs(a.mean() - b.mean()) < 3.0 * joint_se
    ok &= abs(a.mean() - exact) < 3.0 * a.std(ddof=1) / np.sqrt(trials)
    ok &= abs(b.mean() - exact) < 3.0 * b.std(ddof=1) / np.sqrt(trials)
    _report(3, "both sampling routes within joint 3 SE of exp(q^T Sigma k)", ok, time.perf_counter() - start, 10.0)


def test_criterion_04_optimal_proposal_closed_form():
    """Closed-form optimal covariance and the integrability guard."""
    start = time.perf_counter()
    spec = GaussianInputSpec.from_covariance(np.diag([0.1, 0.4]))
    star = optimal_sigma_star(spec)
    ok = np.abs(star - np.diag([1.5, 9.0])).max() <= 1e-12
    try:
        optimal_sigma_star(GaussianInputSpec.isotropic(0.5, 1))
        ok = False
    except InvalidProposalError:
        pass
    _report(4, "Sigma*(diag(0.1, 0.4)) = diag(1.5, 9.0); lambda >= 1/2 rejected", ok, time.perf_counter() - start, 5.0)


def test_criterion_05_quadrature_minimizer_and_mc_ratio():
    """d=1, lambda=0.25: quadrature argmin in the cell containing 3.0 and the
    fixed-pair MC variance ratio within 5% of the quadrature reference.

    The EXPECTED variance under the isotropic proposal is infinite here
    (integrability fails for lambda > 1/6), so the ratio is anchored on a
    fixed pair list where every per-pair variance is finite and has a
    quadrature value.  Pairs are drawn from N(0, 0.25) with |q|, |k| <= 1.
    """
    start = time.perf_counter()
    lam = 0.25
    grid = np.arange(0.5, 10.0 + 1e-9, 0.05)
    values = []
    for s2 in grid:
        try:
            values.append(variance_objective_quadrature(float(s2), lam))
        except NonIntegrableError:
            values.append(np.inf)
    argmin_ok = abs(grid[int(np.argmin(values))] - 3.0) <= 0.05 + 1e-9

    rng = SeededRng(0)
    raw = gaussian_sample(rng.derive(1000), 500, 2) * np.sqrt(lam)
    sel = raw[(np.abs(raw) <= 1.0).all(axis=1)][:20]
    star = optimal_sigma_star(GaussianInputSpec.isotropic(lam, 1))
    iso_est = IsotropicPrfEstimator()
    star_est = GaussianProposalEstimator(star, "psi_star")
    mc_iso = mc_star = ref_iso = ref_star = 0.0
    se_iso_sq = se_star_sq = 0.0
    for pi, (q, k) in enumerate(sel):
        pair = [(np.array([q]), np.array([k]))]
        prng = rng.derive(pi)
        ri = mc_variance(iso_est, pair, 64, 2000, prng)
        rs = mc_variance(star_est, pair, 64, 2000, prng)
        mc_iso += ri.variance
        mc_star += rs.variance
        se_iso_sq += ri.variance_se**2
        se_star_sq += rs.variance_se**2
        ref_iso += pair_variance_quadrature(q, k, 1.0, 64)
        ref_star += pair_variance_quadrature(q, k, float(star[0, 0]), 64)
    ratio_ok = abs((mc_star / mc_iso) / (ref_star / ref_iso) - 1.0) <= 0.05
    margin_ok = (mc_iso - mc_star) > 2.0 * (np.sqrt(se_iso_sq) + np.sqrt(se_star_sq))
    _report(
        5,
        "argmin cell contains sigma*^2 = 3.0; MC/quadrature ratio within 5%",
        argmin_ok and ratio_ok and margin_ok,
        time.perf_counter() - start,
        60.0,
    )


def test_criterion_06_variance_ordering():
    """Optimal proposal beats isotropic sampling at a 2-combined-SE margin
    for three input covariances (fixed 40-pair lists, norms capped at 1.35)."""
    start = time.perf_counter()
    basis = np.linalg.qr(gaussian_sample(SeededRng(5), 2, 2))[0]
    cases = [
        np.diag([0.3, 0.1]),
        np.diag([0.25, 0.25]),
        (basis * np.array([0.30, 0.12])) @ basis.T,
    ]
    ok = True
    for ci, lam in enumerate(cases):
        star = optimal_sigma_star(GaussianInputSpec.from_covariance(lam))
        factor = cholesky_psd(lam).T
        raw = gaussian_sample(SeededRng(0).derive(999), 2000, 4)
        pairs = []
        for row in raw:
            q, k = row[:2] @ factor, row[2:] @ factor
            if np.linalg.norm(q) <= 1.35 and np.linalg.norm(k) <= 1.35:
                pairs.append((q, k))
            if len(pairs) == 40:
                break
        rng = SeededRng(0)
        ri = mc_variance(IsotropicPrfEstimator(), pairs, 64, 6000, rng)
        rs = mc_variance(GaussianProposalEstimator(star, "psi_star"), pairs, 64, 6000, rng)
        ok &= ri.variance - rs.variance > 2.0 * (ri.variance_se + rs.variance_se)
    _report(6, "Var(psi*) < Var(p_I) with 2-combined-SE margin, 3 covariances", ok, time.perf_counter() - start, 60.0)


def test_criterion_07_whitening():
    """Plug-in whitening: exact identity analytically, CLT band on samples."""
    start = time.perf_counter()
    rng = SeededRng(0)
    d, n = 3, 10**4
    g = gaussian_sample(rng.derive(0), d, d) * 0.5
    lam = g.T @ g + 0.2 * np.eye(d)
    factor = plugin_whitening(lam)
    analytic = np.linalg.norm(factor.sigma @ lam - np.eye(d))
    x = gaussian_sample_cov(rng.derive(1), n, cholesky_psd(lam).T)
    sampled = np.linalg.norm(np.cov(x @ factor.matrix.T, rowvar=False) - np.eye(d))
    ok = analytic <= 1e-6 and sampled <= 0.05
    _report(7, f"Cov(MX)=I: analytic {analytic:.1e}, sampled {sampled:.3f}", ok, time.perf_counter() - start, 5.0)


def test_criterion_08_factored_associativity():
    """Factored linear attention equals the naive normalized path, all maps."""
    start = time.perf_counter()
    rng = SeededRng(3)
    d, length = 6, 64
    q = gaussian_sample(rng.derive(0), length, d) * 0.6
    k = gaussian_sample(rng.derive(1), length, d) * 0.6
    v = gaussian_sample(rng.derive(2), length, d)
    maps = [
        RfMap("prf", 48),
        RfMap("prf", 48, orthogonal=True),
        RfMap("trig", 48, trig_target="softmax"),
        RfMap("data_aware", 48, factor=0.8 * np.eye(d)),
        RfMap("is_prf", 48, proposal=SigmaGeometry(np.sqrt(1.5) * np.eye(d))),
    ]
    ok = True
    for rfmap in maps:
        fast = rf_attention(q, k, v, rfmap, SeededRng(9))
        slow = naive_rf_attention(q, k, v, rfmap, SeededRng(9))
        rel = np.linalg.norm(fast.values - slow.values) / np.linalg.norm(slow.values)
        ok &= rel <= 1e-10
    _report(8, "factored path within 1e-10 of naive path, all map kinds", ok, time.perf_counter() - start, 5.0)


def test_criterion_09_complexity_scaling():
    """Fitted log-log runtime slopes: linear for rf, quadratic for exact."""
    start = time.perf_counter()
    rows = run_timing_bench(TimingConfig(seed=0, reps=40, warmup=5))
    slopes = {r[0]: r[4] for r in rows}
    at_top = {r[0]: r[3] for r in rows if r[1] == 8192}
    ok = 0.85 <= slopes["rf"] <= 1.15
    ok &= 1.7 <= slopes["exact"] <= 2.3
    ok &= at_top["rf"] < at_top["exact"]
    _report(
        9,
        f"slopes rf={slopes['rf']:.2f} in [0.85,1.15], exact={slopes['exact']:.2f} in [1.7,2.3], crossover held",
        ok,
        time.perf_counter() - start,
        300.0,
    )


def test_criterion_10_gradient_correctness():
    """Analytic gradients within 1e-4 of central differences, both objectives."""
    start = time.perf_counter()
    rows = run_grad_check(GradCheckConfig(seed=0, threshold=1e-4))
    ok = all(r[3] == "ok" for r in rows)
    detail = ", ".join(f"{r[0]}={r[1]:.1e}" for r in rows)
    _report(10, f"grad check {detail}", ok, time.perf_counter() - start, 10.0)


def test_criterion_11_anisotropy_benefit():
    """Data-aware plug-in attention beats the isotropic estimator at every
    feature budget on condition-number-16 data, with 2-SE margins at m <= 64."""
    start = time.perf_counter()
    rows = run_error_vs_budget(ErrorBudgetConfig(seed=0))
    perf = {r[1]: (r[3], r[4]) for r in rows if r[0] == "performer"}
    dark = {r[1]: (r[3], r[4]) for r in rows if r[0] == "dark_plugin"}
    ok = True
    for m in sorted(perf):
        pm, ps = perf[m]
        dm, ds = dark[m]
        ok &= dm <= pm
        if m <= 64:
            ok &= (pm - dm) > 2.0 * np.sqrt(ps**2 + ds**2)
    _report(11, "dark(plug-in) <= performer at every m; 2-SE margins at m <= 64", ok, time.perf_counter() - start, 120.0)


def test_criterion_12_toy_training_orderings():
    """Learned geometry beats the frozen isotropic baseline in >= 8/10 seeds,
    and the stability sweep's spike ordering holds in a majority of seeds."""
    start = time.perf_counter()
    train_cfg = ToyTrainConfig(seed=0)
    rows = run_toy_train(train_cfg)
    wins = 0
    for s in range(train_cfg.seeds):
        def tail(method):
            losses = [r[3] for r in rows if r[0] == method and r[1] == s and np.isfinite(r[3])]
            return np.mean(losses[-50:])

        wins += tail("dark") < tail("performer")
    train_ok = wins >= 8

    stab_cfg = StabilityConfig(seed=0)
    stab_rows = run_stability_sweep(stab_cfg)
    totals: dict = {}
    for method, lr, s, steps_run, spikes, divs, final in stab_rows:
        totals[(method, s)] = totals.get((method, s), 0) + spikes
    stab_wins = sum(
        totals[("dark", s)] <= totals[("lfk", s)] for s in range(stab_cfg.seeds)
    )
    stab_ok = stab_wins > stab_cfg.seeds / 2
    smallest = min(stab_cfg.lr_grid)
    clean_ok = all(r[5] == 0 for r in stab_rows if abs(r[1] - smallest) < 1e-15)
    _report(
        12,
        f"dark<performer in {wins}/10 seeds; spike ordering in {stab_wins}/{stab_cfg.seeds} seeds; smallest lr clean",
        train_ok and stab_ok and clean_ok,
        time.perf_counter() - start,
        600.0,
    )


def test_criterion_13_csv_determinism(tmp_path):
    """Harness CSVs reproduce bit for bit under fixed seeds at any BLAS
    thread count (runtime columns are the only nondeterministic outputs)."""
    from threadpoolctl import threadpool_limits

    start = time.perf_counter()
    cfg_a = VarianceSweepConfig(
        lam_specs=("diagonal:0.2",), d=1, m_grid=(16, 64), trials=300, seed=7,
        out=str(tmp_path / "a.csv"),
    )
    cfg_b = VarianceSweepConfig(**{**cfg_a.__dict__, "out": str(tmp_path / "b.csv")})
    with threadpool_limits(limits=4):
        run_variance_sweep(cfg_a)
    with threadpool_limits(limits=1):
        run_variance_sweep(cfg_b)
    sweep_same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    t_cfg_a = ToyTrainConfig(steps=40, seeds=2, seed=3, out=str(tmp_path / "t1.csv"))
    t_cfg_b = ToyTrainConfig(steps=40, seeds=2, seed=3, out=str(tmp_path / "t2.csv"))
    run_toy_train(t_cfg_a)
    run_toy_train(t_cfg_b)
    train_same = (tmp_path / "t1.csv").read_bytes() == (tmp_path / "t2.csv").read_bytes()
    _report(13, "bit-identical CSVs across thread counts and reruns", sweep_same and train_same, time.perf_counter() - start, 120.0)
