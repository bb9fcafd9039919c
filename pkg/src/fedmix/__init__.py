"""Multi-site Gaussian mixture estimation without pooling raw data.

A shared set of latent classes is fitted across K sites that hold their
observations locally and differ in class proportions.  The distributed
estimator exchanges only per-round mixing-weight updates and mean
gradients; the lead site tilts its own data by a mixture density ratio to
stand in for each remote site and maximizes the resulting quadratic
surrogate in closed form.  Pooled EM, per-site local EM, and the
label-matched average estimator are included as baselines, together with
the simulation, metrics, and experiment machinery to compare them.
"""

from .baselines import LocalFit, average_estimator, kmeans_init, local_em
from .errors import (
    ContractViolation,
    DegenerateClassError,
    DegenerateTiltError,
    FederationError,
    IncompleteRoundError,
    NumericalOverflowError,
    ParseError,
    UnsupportedConfigurationError,
)
from .experiments import (
    ExperimentPlan,
    FitResult,
    diagnose_study,
    fit_single,
    run_bias_mse,
    run_fig1,
)
from .federation import (
    CommLedger,
    Federation,
    GradientReport,
    MeanBroadcast,
    MessageLog,
    ReplayFederation,
    round_broadcast,
    round_collect,
)
from .metrics import (
    AggregateStats,
    EstimatorRecord,
    InitializationReport,
    ReplicationSummary,
    aggregate,
    align_means,
    align_params,
    approximation_error,
    initialization_radius_check,
    param_distance,
    site_param_distance,
    snr,
    summarize_estimate,
)
from .model import (
    Covariance,
    MIXING_FLOOR,
    ModelParams,
    SiteDataset,
    clamp_mixing_rows,
    component_log_densities,
    density_ratio,
    local_q_gradient,
    local_q_value,
    mixture_log_likelihood,
    responsibilities,
    site_log_density,
    validate_responsibilities,
)
from .pooled import EmConfig, FitTrace, IterationRecord, pooled_em_step, run_pooled_em
from .simgen import StudyConfig, export_study, generate_study, load_site_file, load_study
from .surrogate import (
    RoundInputs,
    SurrogateObjective,
    build_surrogate,
    initial_params,
    maximize_surrogate,
    run_distributed_em,
    update_mixing,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateStats",
    "CommLedger",
    "ContractViolation",
    "Covariance",
    "DegenerateClassError",
    "DegenerateTiltError",
    "EmConfig",
    "EstimatorRecord",
    "ExperimentPlan",
    "Federation",
    "FederationError",
    "FitResult",
    "FitTrace",
    "GradientReport",
    "IncompleteRoundError",
    "InitializationReport",
    "IterationRecord",
    "LocalFit",
    "MIXING_FLOOR",
    "MeanBroadcast",
    "MessageLog",
    "ModelParams",
    "NumericalOverflowError",
    "ParseError",
    "ReplayFederation",
    "ReplicationSummary",
    "RoundInputs",
    "SiteDataset",
    "StudyConfig",
    "SurrogateObjective",
    "UnsupportedConfigurationError",
    "aggregate",
    "align_means",
    "align_params",
    "approximation_error",
    "average_estimator",
    "build_surrogate",
    "clamp_mixing_rows",
    "component_log_densities",
    "density_ratio",
    "diagnose_study",
    "export_study",
    "fit_single",
    "generate_study",
    "initial_params",
    "initialization_radius_check",
    "kmeans_init",
    "load_site_file",
    "load_study",
    "local_em",
    "local_q_gradient",
    "local_q_value",
    "maximize_surrogate",
    "mixture_log_likelihood",
    "param_distance",
    "pooled_em_step",
    "responsibilities",
    "round_broadcast",
    "round_collect",
    "run_bias_mse",
    "run_distributed_em",
    "run_fig1",
    "run_pooled_em",
    "site_log_density",
    "site_param_distance",
    "snr",
    "summarize_estimate",
    "update_mixing",
    "validate_responsibilities",
]
