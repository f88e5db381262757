"""stratkit: prognostic-score stratification and design evaluation for
randomized experiments.

Pipeline: predict potential outcomes per unit (LLM endpoint or local
mocks), collapse them to a one-dimensional prognostic score, form
variance-minimizing strata (sorted pairs/blocks, Mahalanobis pairs, or a
hybrid cost), randomize within strata from seeded counter-based streams,
and evaluate competing designs with a seeded Monte Carlo harness.
"""

from .data import (
    CovariateSchema,
    Dataset,
    UnitRecord,
    Variable,
    load_dataset,
    render_unit_description,
    save_dataset,
    units_from_arrays,
)
from .errors import (
    BackendError,
    ConfigError,
    DataError,
    DesignError,
    EstimationError,
    InvalidProbability,
    StratkitError,
)
from .estimation import (
    EstimateReport,
    PairedVariance,
    difference_in_means,
    matched_pair_variance,
    ols_adjusted_estimate,
    theoretical_variance_ratio,
)
from .harness import (
    DesignSpec,
    DGPSource,
    EmpiricalSource,
    ImputedSample,
    MethodComparison,
    MethodResult,
    ScoreSpec,
    SyntheticDGP,
    emit_report,
    impute_counterfactuals,
    make_linear_dgp,
    run_simulation,
    spec,
    write_replications_csv,
)
from .predictor import (
    ExperimentContext,
    MockLinearBackend,
    MockNoiseBackend,
    PredictionCache,
    PredictionPair,
    RemoteBackend,
    parse_prediction,
    predict_dataset,
    predict_unit,
    render_prompt,
)
from .randomization import Assignment, assign_within_strata, simple_randomization
from .scoring import (
    ScoredUnit,
    prognostic_score,
    score_quality,
    score_units,
    weighted_prognostic_score,
)
from .stratification import (
    HybridCostParams,
    Stratum,
    StratumSet,
    brute_force_pair_matching,
    categorical_strata,
    default_lambda,
    estimate_covariance,
    hybrid_pair_cost,
    mahalanobis_distance,
    min_cost_pair_matching,
    paired_design_strata,
    sorted_block_strata,
)

__version__ = "0.1.0"
