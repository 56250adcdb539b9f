"""splitinfer: inference on data-dependent model properties via repeated
sample-splitting and cross-fitting."""

from .data import Dataset, Roles, as_row_index_set, complement, ingest_csv
from .splits import SplitPlan, TrainEvalPair, enumerate_pairs, generate_plan
from .learners import (
    AveragedModel,
    Learner,
    Model,
    SubprocessLearner,
    average_model,
    builtin,
    train_all,
)
from .moments import EmpiricalMoment, MomentFunction, builtin_moment, empirical
from .zestim import ZEstimate, per_split_estimates, solve, solve_fullsample
from .inference import (
    DeltaSpec,
    InferenceReport,
    difference_reduction,
    identity_reduction,
    jacobian_hat,
    meat_hat,
    named_reduction,
    normal_ci,
    sandwich,
    variance_inflation,
)
from .compare import (
    ComparisonResult,
    compare_models,
    compare_two_learners,
    comparison_ci,
    delta_vector,
    one_sided_test,
    sigma_hat,
)
from .adaptive import AdaptiveCI, AdaptiveConfig, adaptive_ci, gate
from .repro import (
    ReproComponents,
    ReproMeasure,
    conditional_variance_curve,
    repro_measure,
    sigma_D_hat,
)
from .gates import CateLearner, GatesConfig, baselines, ensemble_predict, gates_estimate, het_test, run_gates
from .sim import (
    CopulaDGP,
    ExperimentGrid,
    HteDGP,
    copula_sample,
    estimand_oracle,
    hte_sample,
    linear_cate_sample,
    run_grid,
    synthetic_base,
)
from .report import report_schema_version

__version__ = "0.1.0"
