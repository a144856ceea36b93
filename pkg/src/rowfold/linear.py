"""Weighted least squares on folded rows.

The design matrix is built at unique-row grain; each unique row enters
the normal equations with its accumulated weight, so the solution is
identical to running row-by-row WLS on the raw data. With a two-arm
design of intercept plus treatment indicator and unit weights, the
treatment coefficient is exactly the difference in arm means and its
conventional standard error matches the pooled two-sample t-test.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr

from .dataset import CompressedDataset
from .errors import DataError, EstimationError, RankDeficiencyError

# Relative condition threshold beyond which the normal equations are
# treated as numerically singular and a pivoted-QR diagnosis is run.
_COND_LIMIT = 1e12

_fit_calls = 0


def fit_call_count() -> int:
    """Number of times :func:`fit` has solved a model in this process.

    Exists so callers can prove that post-fit summaries (contrasts,
    covariances) reuse one solve instead of silently refitting.
    """
    return _fit_calls


@dataclass(frozen=True)
class ModelSpec:
    """Declares the regression columns and the weighting rule.

    ``weight_source="column"`` weights each raw row by its analytic
    weight; ``"none"`` gives every raw row unit weight (multiplicities
    still apply, they are counts of actual rows). ``interact_treatment``
    lists features that additionally enter multiplied by each treatment
    indicator, for arm-specific slopes.
    """

    features: tuple[str, ...] = ()
    intercept: bool = True
    treatment: bool = True
    interact_treatment: tuple[str, ...] = ()
    weight_source: str = "column"

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "interact_treatment", tuple(self.interact_treatment))
        if self.weight_source not in ("column", "none"):
            raise DataError(f"unknown weight_source: {self.weight_source!r}")
        unknown = set(self.interact_treatment) - set(self.features)
        if unknown:
            raise DataError(
                "interact_treatment names features not in the model: "
                + ", ".join(sorted(unknown))
            )


@dataclass(frozen=True)
class DesignMatrix:
    """Regression inputs at unique-row grain.

    ``row_weight`` is the per-unique-row effective weight (sum of raw
    analytic weights, or the multiplicity under unit weighting);
    ``row_weight_sq`` is the matching sum of squared raw weights, which
    heteroskedasticity-robust covariances need to reproduce raw-grain
    results exactly. ``groups`` maps term-group names to column index
    ranges for callers that build structured designs.
    """

    matrix: np.ndarray             # (m, p)
    outcome: np.ndarray            # (m,)
    row_weight: np.ndarray         # (m,)
    row_weight_sq: np.ndarray      # (m,)
    multiplicity: np.ndarray       # (m,)
    column_names: tuple[str, ...]
    n_raw: int
    arm: np.ndarray | None = None
    groups: dict[str, tuple[int, ...]] | None = None

    def __post_init__(self):
        m, p = self.matrix.shape
        if p != len(self.column_names):
            raise DataError("column name count does not match design width")
        for arr in (self.outcome, self.row_weight, self.row_weight_sq, self.multiplicity):
            if len(arr) != m:
                raise DataError("design arrays have mismatched lengths")

    @property
    def n_unique(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]


def build_design(data: CompressedDataset, spec: ModelSpec) -> DesignMatrix:
    """Assemble the model matrix from folded rows.

    Column order: intercept, one indicator per non-control arm,
    features, then treatment-by-feature interactions. Indicator columns
    are named ``treat[<label>]`` after the arm they mark.
    """
    m = data.n_unique
    cols: list[np.ndarray] = []
    names: list[str] = []
    groups: dict[str, list[int]] = {"intercept": [], "treat": [], "cov": [], "treat:cov": []}

    if spec.intercept:
        groups["intercept"].append(len(cols))
        cols.append(np.ones(m))
        names.append("intercept")

    arm_indicators: list[tuple[str, np.ndarray]] = []
    if spec.treatment:
        for code in range(1, len(data.arm_labels)):
            label = data.arm_labels[code]
            indicator = (data.arm == code).astype(np.float64)
            arm_indicators.append((label, indicator))
            groups["treat"].append(len(cols))
            cols.append(indicator)
            names.append(f"treat[{label}]")

    index = {name: j for j, name in enumerate(data.feature_names)}
    for feat in spec.features:
        if feat not in index:
            raise DataError(f"unknown feature: {feat!r}")
        groups["cov"].append(len(cols))
        cols.append(data.features[:, index[feat]])
        names.append(feat)

    for feat, (label, indicator) in itertools.product(
        spec.interact_treatment, arm_indicators
    ):
        groups["treat:cov"].append(len(cols))
        cols.append(indicator * data.features[:, index[feat]])
        names.append(f"treat[{label}]:{feat}")

    if not cols:
        raise DataError("model has no columns")
    matrix = np.column_stack(cols)

    if spec.weight_source == "column":
        w, w2 = data.aggregate_weight, data.aggregate_weight_sq
    else:
        mult = data.multiplicity.astype(np.float64)
        w, w2 = mult, mult

    return DesignMatrix(
        matrix=matrix,
        outcome=data.outcome,
        row_weight=w,
        row_weight_sq=w2,
        multiplicity=data.multiplicity,
        column_names=tuple(names),
        n_raw=data.n_raw,
        arm=data.arm,
        groups={k: tuple(v) for k, v in groups.items() if v},
    )


@dataclass(frozen=True)
class FitResult:
    """A solved weighted least-squares model.

    Keeps the (small, p-by-p) moment matrix and enough per-unique-row
    state for covariance estimators to run without touching raw data or
    refitting.
    """

    beta: np.ndarray               # (p,)
    column_names: tuple[str, ...]
    design: DesignMatrix
    moment: np.ndarray             # MᵀWM, (p, p)
    residuals: np.ndarray          # (m,) at unique-row grain
    weighted_rss: float
    n_raw: int
    dof: int

    @property
    def n_columns(self) -> int:
        return len(self.beta)

    def coef(self, name: str) -> float:
        try:
            return float(self.beta[self.column_names.index(name)])
        except ValueError:
            raise EstimationError(f"no coefficient named {name!r}") from None

    @property
    def fitted(self) -> np.ndarray:
        return self.design.outcome - self.residuals


def _diagnose_rank(design: DesignMatrix) -> tuple[str, ...]:
    """Name the design columns that a pivoted QR marks as redundant."""
    root_w = np.sqrt(design.row_weight)
    weighted = design.matrix * root_w[:, None]
    _, r, piv = qr(weighted, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return design.column_names
    rank = int(np.count_nonzero(diag > diag[0] * np.finfo(np.float64).eps * max(weighted.shape)))
    return tuple(design.column_names[j] for j in sorted(piv[rank:]))


def fit(design: DesignMatrix) -> FitResult:
    """Solve WLS via the normal equations on accumulated moments.

    Raises :class:`RankDeficiencyError` naming the collinear columns when
    the scaled moment matrix is numerically singular.
    """
    global _fit_calls
    wm = design.matrix * design.row_weight[:, None]
    moment = design.matrix.T @ wm
    rhs = wm.T @ design.outcome

    scale = np.sqrt(np.diag(moment))
    if (scale <= 0).any() or not np.isfinite(scale).all():
        raise RankDeficiencyError(_diagnose_rank(design))
    normalized = moment / np.outer(scale, scale)
    if np.linalg.cond(normalized) > _COND_LIMIT:
        raise RankDeficiencyError(_diagnose_rank(design))
    try:
        factor = cho_factor(normalized)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(_diagnose_rank(design)) from None
    beta = cho_solve(factor, rhs / scale) / scale

    residuals = design.outcome - design.matrix @ beta
    weighted_rss = float(design.row_weight @ (residuals * residuals))
    n = design.n_raw
    p = design.n_columns
    if n <= p:
        raise EstimationError(f"{n} rows cannot identify {p} coefficients with error variance")
    _fit_calls += 1
    return FitResult(
        beta=beta,
        column_names=design.column_names,
        design=design,
        moment=moment,
        residuals=residuals,
        weighted_rss=weighted_rss,
        n_raw=n,
        dof=n - p,
    )


def predict(result: FitResult, matrix: np.ndarray) -> np.ndarray:
    """Fitted values for new design rows (columns as in the fit)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != result.n_columns:
        raise EstimationError(
            f"prediction rows must have {result.n_columns} columns"
        )
    return matrix @ result.beta


def treatment_effect(result: FitResult, arm_label: str | None = None) -> float:
    """The coefficient on a treatment indicator.

    With more than one treated arm the label must be given.
    """
    treat_cols = [n for n in result.column_names if n.startswith("treat[") and ":" not in n]
    if not treat_cols:
        raise EstimationError("model has no treatment indicator")
    if arm_label is None:
        if len(treat_cols) > 1:
            raise EstimationError("several treated arms; name one")
        return result.coef(treat_cols[0])
    name = f"treat[{arm_label}]"
    if name not in treat_cols:
        raise EstimationError(f"no treated arm labeled {arm_label!r}")
    return result.coef(name)
