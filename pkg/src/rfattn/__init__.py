"""Positive random-feature attention with data-aware sampling geometries.

A numpy/scipy library for unbiased random-feature estimation of softmax-type
kernels, importance-sampling-optimal proposal distributions, Mahalanobis
kernel geometry, linear-time attention, and covariance learning, together
with the Monte Carlo harness that verifies each claim at desk scale.
"""

from .attention import (
    AttentionOutput,
    DenominatorUnderflow,
    RfMap,
    baseline_attention,
    exact_attention,
    is_prf_map,
    naive_rf_attention,
    rf_attention,
)
from .features import (
    DegenerateBlockError,
    FeatureMatrix,
    NonFiniteError,
    ProjectionSet,
    data_aware_prf_map,
    draw_projections,
    prf_map,
    trig_map,
)
from .kernels import (
    InvalidWeightError,
    KernelEstimate,
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
from .learning import (
    CovarianceFactor,
    GaussianBatchSource,
    InsufficientDataError,
    NearSingularError,
    TrainTrace,
    TrainingBatch,
    estimate_lambda,
    grad_check,
    grad_check_projections,
    learn_M,
    learn_projections_lfk,
    load_factor,
    plugin_whitening,
    save_factor,
)
from .linalg import NoConvergenceError, NotPSDError, SymmetricEigen, cholesky_psd, sym_eig
from .rng import SeededRng, gaussian_sample, gaussian_sample_cov, uniform_open
from .sampling import (
    GaussianInputSpec,
    InvalidProposalError,
    NonIntegrableError,
    QuadratureNotConvergedError,
    QuadratureSpec,
    VarianceReport,
    empirical_B,
    expected_squared_kernel,
    expected_variance_quadrature,
    gaussian_B,
    mc_variance,
    optimal_sigma_star,
    pair_variance_quadrature,
    psi_star_logdensity,
    variance_objective_quadrature,
)

__version__ = "0.1.0"
