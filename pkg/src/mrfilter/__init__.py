"""Fast approximate Kalman filtering for large spatio-temporal models.

The package provides a multi-resolution low-rank covariance factorization and
filters built on it (linear-Gaussian, non-Gaussian via Newton updates,
nonlinear via Jacobian linearization), exact and ensemble baselines, and an
experiment harness with a CLI.
"""

from .partition import (
    GridSpec,
    MultiResPartition,
    PartitionError,
    Region,
    apply_permutation,
    build_partition,
    export_permutation_csv,
    partition_summary,
    unit_circle_grid,
    unit_square_grid,
)
from .covmodel import (
    CovarianceFunction,
    FitError,
    GammaObs,
    GaussianObs,
    ObservationModel,
    PoissonObs,
    SpatialFit,
    TaperFunction,
    cov_block,
    fit_spatial_mle,
    obs_score_hess,
    taper_matrix,
    tune_taper_radius,
)
from .mralp import (
    CovSource,
    FactorCovSource,
    FunctionCovSource,
    MatrixCovSource,
    RankDeficiencyError,
    RegionBasis,
    decompose,
    identity_basis,
    naive_decompose,
    reconstruct,
    select_phi,
)
from .blocksparse import (
    BlockFactor,
    BlockGram,
    BlockTriangular,
    FactorizationError,
    LeafBlockWeights,
    export_pattern_csv,
    factor_mask,
    factor_postmultiply,
    gram_mask,
    gram_plus_identity,
    invert_lower_triangular,
    lower_mask,
    selection_weights,
    structure_check,
    structured_cholesky,
)
from .dynamics import (
    LinearDynamics,
    NonlinearDynamics,
    advection_diffusion_coefficients,
    advection_diffusion_matrix,
    ar_dynamics,
    lorenz05_drift,
    lorenz05_dynamics,
    lorenz05_jacobian,
    lorenz05_step_rk4,
    quadratic_dynamics,
)
from .filters import (
    FilterError,
    FilterResult,
    FilterState,
    NewtonConvergenceError,
    Observation,
    StateSpaceModel,
    dense_laplace_filter,
    enkf_filter,
    forecast,
    kalman_filter,
    laplace_newton_step,
    mrf_lp_filter,
    mrf_lp_filter_nongaussian,
    mrf_lp_filter_nonlinear,
)

__version__ = "0.1.0"

from .harness import (  # noqa: E402  (needs __version__)
    IngestError,
    MethodSpec,
    MetricsTable,
    RealDataFit,
    Scenario,
    ScenarioError,
    fit_real_data_hyperparameters,
    get_scenario,
    ingest_grid_csv,
    mspe,
    run_method,
    run_scaling,
    run_scenario,
    scenario_from_config,
    scenario_presets,
    simulate_truth,
    write_grid_csv,
)
