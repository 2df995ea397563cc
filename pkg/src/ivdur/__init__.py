"""ivdur: instrumental-variable quantile estimation for censored durations.

Estimates counterfactual quantile curves of a duration outcome under an
endogenous categorical treatment, using a categorical instrument and data
subject to random right censoring.  The pipeline estimates smoothed
conditional sub-survival functions, solves a nonlinear system of moment
equations pointwise on a grid, bootstraps confidence intervals and, where
censoring breaks exact identification, computes outer sets of admissible
quantile vectors.
"""

__version__ = "0.1.0"

from .data import Dataset, ObservationRecord, read_csv, write_csv
from .errors import (
    BootstrapDegeneracy,
    DataFormatError,
    DegenerateSample,
    EmptyCell,
    EmptyInstrumentLevel,
    InvalidBandwidth,
    IvdurError,
    TailDominates,
    TriangularPrecondition,
)
from .estimator import (
    PhiEstimate,
    ResidualContext,
    SolveResult,
    SolverConfig,
    estimate_phi,
    jacobian,
    residual,
    solve_at_u,
    two_step_weighting,
)
from .fixtures import (
    AnalyticFixture,
    counterexample_fixture,
    dgp_analytic_fixture,
    exponential_fixture,
)
from .inference import (
    AteResult,
    BootstrapResult,
    FunctionalSpec,
    HazardValue,
    SurvivalValue,
    ate,
    bootstrap,
    counterfactual_hazard,
    counterfactual_survival,
    monotonize,
    pava,
    qte,
)
from .partial_id import (
    BoxUnion,
    BreakpointReport,
    Interval,
    censored_residual_R,
    detect_breakpoint,
    outer_set,
    triangular_outer_set,
)
from .sim import (
    DgpConfig,
    ReplicationSummary,
    SimulatedData,
    StudyConfig,
    dgp_generate,
    run_replication_study,
)
from .survival import (
    KernelSmoothedSurvival,
    LocalPolySurvival,
    SmoothSurvival,
    StepSurvival,
    SurvivalModel,
    bandwidth_rule_of_thumb,
    choose_tbar,
    epanechnikov,
    epanechnikov_cdf,
    fit_survival_model,
    kernel_smooth,
    km_estimate,
    localpoly_smooth,
    nelson_aalen_invert,
)
