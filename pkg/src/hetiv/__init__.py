"""hetiv: heteroskedasticity-based instrumental-variable estimation for
binary-outcome survey microdata, plus a Monte Carlo validation harness."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    EstimationError,
    HetivError,
    SingularMatrixError,
)
from .pipeline import (
    ColumnSpec,
    Dataset,
    DrugTaxonomy,
    RestrictionSpec,
    apply_restrictions,
    code_drug_use,
    dataset_from_columns,
    load_table,
    recreational_dependency_taxonomy,
    soft_hard_taxonomy,
    weighted_descriptives,
)
from .regression import (
    DesignMatrix,
    FitResult,
    ModelSpec,
    WaldTest,
    build_design,
    estimation_mask,
    hc_vcov,
    ols_fit,
    wald_joint,
)
from .lewbel import (
    InstrumentSet,
    first_stage_residuals,
    hetero_diagnostic,
    make_lewbel_instruments,
)
from .tsls import (
    DifferenceTest,
    IvFitResult,
    JTest,
    difference_test,
    external_iv_fit,
    first_stage_f,
    hansen_j,
    subgroup_difference,
    tsls_fit,
)
from .montecarlo import (
    DgpConfig,
    EstimatorSummary,
    McSummary,
    calibrate_threshold,
    replication_seed,
    run_mc,
    simulate_dgp,
)
from .config import RunConfig, parse_config
from .render import Cell, RenderedTable, render_csv, render_human, stars_for
from .report import run_montecarlo, run_replication

__all__ = [
    "__version__",
    "HetivError", "ConfigError", "DataError", "EstimationError", "SingularMatrixError",
    "ColumnSpec", "Dataset", "DrugTaxonomy", "RestrictionSpec",
    "apply_restrictions", "code_drug_use", "dataset_from_columns", "load_table",
    "recreational_dependency_taxonomy", "soft_hard_taxonomy", "weighted_descriptives",
    "DesignMatrix", "FitResult", "ModelSpec", "WaldTest",
    "build_design", "estimation_mask", "hc_vcov", "ols_fit", "wald_joint",
    "InstrumentSet", "first_stage_residuals", "hetero_diagnostic", "make_lewbel_instruments",
    "DifferenceTest", "IvFitResult", "JTest", "difference_test", "external_iv_fit",
    "first_stage_f", "hansen_j", "subgroup_difference", "tsls_fit",
    "DgpConfig", "EstimatorSummary", "McSummary", "calibrate_threshold",
    "replication_seed", "run_mc", "simulate_dgp",
    "RunConfig", "parse_config",
    "Cell", "RenderedTable", "render_csv", "render_human", "stars_for",
    "run_montecarlo", "run_replication",
]
