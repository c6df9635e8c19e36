"""Multi-state transition modelling for irregularly observed visit data.

The package fits multinomial logistic transition models to chains of
assessment visits nested in patients and practices, corrects inference
for the clustering with practice-level bootstraps (direct refitting or
a one-step estimating-function variant), forecasts state occupancy over
time, and ships a simulation harness for bias/coverage experiments.

Typical flow::

    table = load_visits("visits.csv")
    transitions = build_transitions(table, spec)
    result = fit(transitions)
    replicates = efb(result, transitions, B=1000, seed=7)
    intervals = percentile_ci(replicates)
    curve = predict_occupancy(result, {"dose": "medium"}, bootstrap=replicates)

The ``visitchain`` command line exposes the same pipeline; see
:mod:`visitchain.cli`.
"""

from .errors import (
    VisitChainError,
    VisitDataError,
    EncodingError,
    ConfigError,
    ConvergenceError,
    SeparationError,
    ResamplingError,
)
from .data_model import (
    StateSpace,
    VisitRecord,
    VisitTable,
    NumericCovariate,
    CategoricalCovariate,
    ModelSpec,
    TransitionRow,
    DesignBlock,
    TransitionSet,
    TransitionCounts,
    build_transitions,
    transition_matrix,
    load_visits,
)
from .estimator import (
    BlockFit,
    FitResult,
    loglik,
    score,
    information,
    score_and_information,
    fit_block,
    fit,
)
from .resampling import (
    BlockReplicates,
    BootstrapSet,
    IntervalRow,
    IntervalTable,
    ComparisonReport,
    replicate_multiplicities,
    resample_clusters,
    direct_bootstrap,
    efb,
    percentile_ci,
    paired_interval_csv,
    compare_methods,
)
from .occupancy import (
    OccupancyCurve,
    transition_matrix_at,
    predict_occupancy,
)
from .simulator import (
    SizeLaw,
    SimConfig,
    MarginalSolution,
    MarginalTruth,
    CoverageRow,
    CoverageStudy,
    COEFFICIENT_NAMES,
    BENCHMARK_MARGINAL,
    BENCHMARK_CONDITIONAL,
    VISIT_CAP,
    two_state_spec,
    generate,
    marginal_coefficients,
    calibrate_to_marginal,
    marginal_truth,
    coverage_study,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "VisitChainError",
    "VisitDataError",
    "EncodingError",
    "ConfigError",
    "ConvergenceError",
    "SeparationError",
    "ResamplingError",
    # data model
    "StateSpace",
    "VisitRecord",
    "VisitTable",
    "NumericCovariate",
    "CategoricalCovariate",
    "ModelSpec",
    "TransitionRow",
    "DesignBlock",
    "TransitionSet",
    "TransitionCounts",
    "build_transitions",
    "transition_matrix",
    "load_visits",
    # estimation
    "BlockFit",
    "FitResult",
    "loglik",
    "score",
    "information",
    "score_and_information",
    "fit_block",
    "fit",
    # resampling
    "BlockReplicates",
    "BootstrapSet",
    "IntervalRow",
    "IntervalTable",
    "ComparisonReport",
    "replicate_multiplicities",
    "resample_clusters",
    "direct_bootstrap",
    "efb",
    "percentile_ci",
    "paired_interval_csv",
    "compare_methods",
    # occupancy
    "OccupancyCurve",
    "transition_matrix_at",
    "predict_occupancy",
    # simulation
    "SizeLaw",
    "SimConfig",
    "MarginalSolution",
    "MarginalTruth",
    "CoverageRow",
    "CoverageStudy",
    "COEFFICIENT_NAMES",
    "BENCHMARK_MARGINAL",
    "BENCHMARK_CONDITIONAL",
    "VISIT_CAP",
    "two_state_spec",
    "generate",
    "marginal_coefficients",
    "calibrate_to_marginal",
    "marginal_truth",
    "coverage_study",
]
