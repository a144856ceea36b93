"""rowfold: regression analysis of randomized experiments on folded rows.

Rows that agree exactly on (outcome, features, arm) are folded into one
weighted row before estimation, so analyses over low-cardinality metrics
run on thousands of unique rows instead of hundreds of millions of raw
ones — with results that match the raw computation to machine precision.
"""

from .bayes import NormalPrior, Posterior, empirical_prior, prob_best_arm, shrink
from .covariance import (
    CovarianceResult,
    cov_cluster,
    cov_iid,
    cov_white,
    summarize,
)
from .dataset import (
    CompressedDataset,
    Dataset,
    Schema,
    ValidationReport,
    compress,
    compression_ratio,
    expand,
    load_csv,
    uncompressed,
    write_csv,
)
from .dynamic import (
    EffectEstimate,
    PanelDesign,
    PanelFit,
    TimeBasis,
    build_panel_design,
    cumulative_effect,
    daily_effect,
    difference_of_daily,
    fit_panel,
)
from .errors import (
    ConfigError,
    DataError,
    EstimationError,
    RankDeficiencyError,
    RowfoldError,
)
from .linear import (
    DesignMatrix,
    FitResult,
    ModelSpec,
    build_design,
    fit,
    fit_call_count,
    predict,
    treatment_effect,
)
from .quantile import (
    BalanceReport,
    QTEResult,
    QuantileFit,
    balance,
    bootstrap_qte,
    check_loss,
    empirical_quantile,
    fit_quantile,
    objective,
    qte,
)
from .simgen import (
    CoverageRow,
    coverage_study,
    gen_ab,
    gen_panel,
    true_qte,
    zero_inflated_quantile,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceReport",
    "CompressedDataset",
    "ConfigError",
    "CovarianceResult",
    "CoverageRow",
    "DataError",
    "Dataset",
    "DesignMatrix",
    "EffectEstimate",
    "EstimationError",
    "FitResult",
    "ModelSpec",
    "NormalPrior",
    "PanelDesign",
    "PanelFit",
    "Posterior",
    "QTEResult",
    "QuantileFit",
    "RankDeficiencyError",
    "RowfoldError",
    "Schema",
    "TimeBasis",
    "ValidationReport",
    "balance",
    "bootstrap_qte",
    "build_design",
    "build_panel_design",
    "check_loss",
    "compress",
    "compression_ratio",
    "coverage_study",
    "cov_cluster",
    "cov_iid",
    "cov_white",
    "cumulative_effect",
    "daily_effect",
    "difference_of_daily",
    "empirical_prior",
    "empirical_quantile",
    "expand",
    "fit",
    "fit_call_count",
    "fit_panel",
    "fit_quantile",
    "gen_ab",
    "gen_panel",
    "load_csv",
    "objective",
    "predict",
    "prob_best_arm",
    "qte",
    "shrink",
    "summarize",
    "treatment_effect",
    "true_qte",
    "uncompressed",
    "write_csv",
    "zero_inflated_quantile",
]
