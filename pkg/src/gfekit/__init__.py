"""Grouped fixed-effects panel estimation and structural modeling.

The package bundles four layers: panel ingestion and design matrices
(`panel`), the pooled / within / grouped estimators with BIC model
selection (`estimators`), a Monte Carlo study engine with a synthetic
panel generator (`simulation`), and a quasi-hyperbolic discounting
model with its simulated-method-of-moments estimator (`behavioral`,
`smm`). The `cli` module ties them into reproducible seeded runs.
"""

from .behavioral import (
    BehavioralParams,
    Grid,
    PolicySolution,
    TrajectorySet,
    abortion_prob,
    flow_utility,
    group_moment_series,
    mh_transition,
    model_moments,
    simulate_trajectories,
    solve_policy,
)
from .errors import (
    ConfigError,
    DomainError,
    DuplicateKeyError,
    EmptyInputError,
    GfekitError,
    NoWithinVariationError,
    ParseError,
    PreconditionError,
    SchemaError,
    SingularDesignError,
    SolverError,
    SpecError,
)
from .estimators import (
    BicScan,
    DesignSpec,
    GfeFit,
    LinearFit,
    assign_groups,
    bic,
    default_restarts,
    fe_fit,
    gfe_fit,
    group_flow,
    ols_fit,
    profile_regression,
    select_groups,
)
from .panel import (
    BuiltDesign,
    ClusteredCov,
    PanelDataset,
    balance_panel,
    build_design,
    clustered_covariance,
    load_panel,
    make_absorbing,
    within_transform,
)
from .simulation import (
    DgpSpec,
    SimDraw,
    SimStudyResult,
    alpha_treatment_correlation,
    bias_study_spec,
    lag_study_spec,
    profile_curve,
    profile_rmse,
    profiles_matrix,
    run_monte_carlo,
    simulate_dgp,
    simulate_dgp_lagged,
)
from .smm import (
    MomentTarget,
    SmmConfig,
    SmmFit,
    bundled_target_path,
    fit_smm,
    load_moment_target,
    nelder_mead,
    simulated_annealing,
    smm_objective,
)

__version__ = "0.1.0"

__all__ = [
    "BehavioralParams", "Grid", "PolicySolution", "TrajectorySet",
    "abortion_prob", "flow_utility", "group_moment_series", "mh_transition",
    "model_moments", "simulate_trajectories", "solve_policy",
    "ConfigError", "DomainError", "DuplicateKeyError", "EmptyInputError",
    "GfekitError", "NoWithinVariationError", "ParseError",
    "PreconditionError", "SchemaError", "SingularDesignError", "SolverError",
    "SpecError",
    "BicScan", "DesignSpec", "GfeFit", "LinearFit", "assign_groups", "bic",
    "default_restarts", "fe_fit", "gfe_fit", "group_flow", "ols_fit",
    "profile_regression", "select_groups",
    "BuiltDesign", "ClusteredCov", "PanelDataset", "balance_panel",
    "build_design", "clustered_covariance", "load_panel", "make_absorbing",
    "within_transform",
    "DgpSpec", "SimDraw", "SimStudyResult", "alpha_treatment_correlation",
    "bias_study_spec", "lag_study_spec", "profile_curve", "profile_rmse",
    "profiles_matrix", "run_monte_carlo", "simulate_dgp",
    "simulate_dgp_lagged",
    "MomentTarget", "SmmConfig", "SmmFit", "bundled_target_path", "fit_smm",
    "load_moment_target", "nelder_mead", "simulated_annealing",
    "smm_objective",
    "__version__",
]
