"""Two-step analysis of incompletely observed marker trajectories and event times.

The package simulates and analyzes cohorts where a positive marker is
measured on a periodic grid, cells can be missing in ways tied to the
subject's latent trajectory, and the hazard of an event depends on the
lagged marker level.  The analysis chain is: chained-equations multiple
imputation of the log marker (optionally with a flag for subjects
missing every in-follow-up value), a shared random-effects joint model
per completed dataset, and combination across multiples.
"""

from .cohort import (
    CohortDataset,
    PeriodGrid,
    SimulatedTruth,
    SubjectRecord,
    derive_omit,
    read_wide_csv,
    to_long_format,
    truncate_post_event,
    write_wide_csv,
)
from .errors import FitError, ImputationError, IngestionError
from .harness import (
    METHODS,
    AnalysisResult,
    MethodResult,
    ReplicationResult,
    StudyConfig,
    StudyResult,
    desk_profile,
    paper_profile,
    run_replication,
    run_study,
    run_two_step_on_csv,
    two_step_analysis,
)
from .fcs import (
    CompletedDataset,
    EventFeatures,
    ImputationSpec,
    PeriodImputationModel,
    build_event_features,
    draw_posterior_and_impute,
    imputation_diagnostics,
    initial_fill,
    run_fcs,
)
from .joint_model import (
    JointFit,
    JointModelSpec,
    JointParams,
    LmmFit,
    fit_jm,
    fit_lmm,
    jm_loglik,
)
from .pooling import PooledEstimate, StudyMetrics, compute_metrics, rubin_pool
from .simulate import (
    MISSINGNESS_SCENARIOS,
    CovariateModel,
    MarkerModelParams,
    MissingnessParams,
    SurvivalModelParams,
    apply_missingness,
    missingness_for_scenario,
    simulate_cohort,
    simulate_events,
    simulate_markers,
    survival_for_hypothesis,
)

__version__ = "0.1.0"
