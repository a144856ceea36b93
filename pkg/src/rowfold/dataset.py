"""Experiment data ingestion, validation, and duplicate-row folding.

Estimators in this package never iterate over raw observations. A
:class:`Dataset` is folded into a :class:`CompressedDataset` in which
identical rows are collapsed into a single row carrying a multiplicity
count and accumulated analytic weights. Low-cardinality metrics (counts,
rates over common denominators) collapse dramatically; continuous
metrics simply pass through with a fold ratio near 1. Estimates computed
from the folded rows match the row-by-row computation because duplicated
rows share outcome, features, and arm, hence share fitted residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError

REASON_MISSING = "missing-value"
REASON_WEIGHT = "non-positive-weight"

# Cap on per-row drop detail retained in a ValidationReport.
_MAX_DROP_DETAIL = 1000


def _frozen(values, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(values, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Schema:
    """Maps engine roles onto the columns of a CSV extract.

    Outcome and treatment columns are required; features, analytic
    weight, cluster (account) id, and period columns are optional. When
    ``control_label`` is unset, the first treatment label seen in file
    order becomes the control arm.
    """

    outcome: str
    treatment: str
    features: tuple[str, ...] = ()
    weight: str | None = None
    cluster: str | None = None
    time: str | None = None
    control_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = list(self.columns)
        if len(set(names)) != len(names):
            raise DataError("schema column names must be unique")
        for name, value in (("outcome", self.outcome), ("treatment", self.treatment)):
            if not value:
                raise DataError(f"schema requires a {name} column")

    @property
    def columns(self) -> tuple[str, ...]:
        extra = tuple(c for c in (self.weight, self.cluster, self.time) if c is not None)
        return (self.outcome, self.treatment, *self.features, *extra)


@dataclass(frozen=True)
class ColumnSummary:
    minimum: float
    maximum: float
    mean: float
    zero_fraction: float


@dataclass(frozen=True)
class ValidationReport:
    """Ingestion audit: how many rows survived and why the rest did not."""

    row_count: int
    kept: int
    dropped_by_reason: dict[str, int]
    dropped_rows: tuple[tuple[int, str], ...]  # (row index, reason), capped
    columns: dict[str, ColumnSummary]

    @property
    def dropped(self) -> int:
        return sum(self.dropped_by_reason.values())

    def __post_init__(self):
        if self.row_count != self.kept + self.dropped:
            raise DataError("validation accounting mismatch: rows != kept + dropped")


@dataclass(frozen=True)
class Dataset:
    """Validated experiment rows, one per (account, period) observation.

    Immutable after construction: all arrays are marked read-only, so
    concurrent readers are safe.
    """

    outcome: np.ndarray            # (n,)
    features: np.ndarray           # (n, k)
    weight: np.ndarray             # (n,), strictly positive
    cluster: np.ndarray            # (n,) dense account codes
    period: np.ndarray             # (n,)
    arm: np.ndarray                # (n,), 0 = control
    feature_names: tuple[str, ...]
    arm_labels: tuple[str, ...]
    schema: Schema | None = None
    truth: dict | None = None      # ground-truth record for simulated data

    def __post_init__(self):
        outcome = _frozen(self.outcome)
        if len(outcome) == 0:
            raise DataError("dataset has zero rows")
        features = _frozen(self.features).reshape(len(outcome), -1)
        weight = _frozen(self.weight)
        cluster = _frozen(self.cluster, np.int64)
        period = _frozen(self.period, np.int64)
        arm = _frozen(self.arm, np.int64)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "cluster", cluster)
        object.__setattr__(self, "period", period)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "arm_labels", tuple(self.arm_labels))

        n = len(outcome)
        if n == 0:
            raise DataError("dataset has zero rows")
        for name, arr in (("features", features), ("weight", weight),
                          ("cluster", cluster), ("period", period), ("arm", arm)):
            if len(arr) != n:
                raise DataError(f"{name} length does not match outcome length")
        if features.shape[1] != len(self.feature_names):
            raise DataError("feature column count does not match feature names")
        if not np.isfinite(outcome).all() or not np.isfinite(features).all():
            raise DataError("non-finite outcome or feature values")
        if not np.isfinite(weight).all() or (weight <= 0).any():
            raise DataError("weights must be finite and strictly positive")
        k = len(self.arm_labels)
        present = np.unique(arm)
        if k < 1 or not np.array_equal(present, np.arange(k)):
            raise DataError("arm codes must be contiguous from 0 and all arms present")

    @property
    def n_rows(self) -> int:
        return len(self.outcome)

    @property
    def n_arms(self) -> int:
        return len(self.arm_labels)


@dataclass(frozen=True)
class CompressedDataset:
    """Unique (outcome, features, arm) rows with accumulated weights.

    ``multiplicity`` counts the raw rows folded into each unique row;
    ``aggregate_weight`` and ``aggregate_weight_sq`` carry the sum of the
    raw analytic weights and of their squares. The squared sum is what
    lets heteroskedasticity-robust covariances reproduce the row-by-row
    computation exactly even when weights differ inside a fold group.
    """

    outcome: np.ndarray            # (m,)
    features: np.ndarray           # (m, k)
    arm: np.ndarray                # (m,)
    multiplicity: np.ndarray       # (m,) positive ints
    aggregate_weight: np.ndarray   # (m,) sums of raw weights
    aggregate_weight_sq: np.ndarray
    feature_names: tuple[str, ...]
    arm_labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "outcome", _frozen(self.outcome))
        object.__setattr__(self, "features", _frozen(self.features).reshape(len(self.outcome), -1))
        object.__setattr__(self, "arm", _frozen(self.arm, np.int64))
        object.__setattr__(self, "multiplicity", _frozen(self.multiplicity, np.int64))
        object.__setattr__(self, "aggregate_weight", _frozen(self.aggregate_weight))
        object.__setattr__(self, "aggregate_weight_sq", _frozen(self.aggregate_weight_sq))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "arm_labels", tuple(self.arm_labels))
        if (self.multiplicity < 1).any():
            raise DataError("multiplicities must be positive")
        if (self.aggregate_weight <= 0).any():
            raise DataError("aggregate weights must be positive")

    @property
    def n_unique(self) -> int:
        return len(self.outcome)

    @property
    def n_raw(self) -> int:
        return int(self.multiplicity.sum())


def _row_keys(ds: Dataset) -> np.ndarray:
    # Bit-exact grouping: rows compare equal only when every float64 bit
    # pattern matches (0.0 and -0.0 are distinct keys).
    cols = np.concatenate(
        [ds.outcome[:, None], ds.features, ds.arm.astype(np.float64)[:, None]], axis=1
    )
    cols = np.ascontiguousarray(cols)
    return cols.view(np.dtype((np.void, cols.dtype.itemsize * cols.shape[1]))).ravel()


def compress(ds: Dataset) -> CompressedDataset:
    """Fold identical (outcome, features, arm) rows into weighted unique rows.

    Intended for cross-sectional fits. Cluster and period identities are
    not retained, so cluster-robust covariances cannot be computed from
    the result; fits that need them run on :func:`uncompressed` rows.
    The unique rows are emitted in byte order of their key, which makes
    the result independent of the input row order.
    """
    keys = _row_keys(ds)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    m = len(first)
    multiplicity = np.bincount(inverse, minlength=m)
    agg_w = np.bincount(inverse, weights=ds.weight, minlength=m)
    agg_w2 = np.bincount(inverse, weights=ds.weight * ds.weight, minlength=m)
    return CompressedDataset(
        outcome=ds.outcome[first],
        features=ds.features[first],
        arm=ds.arm[first],
        multiplicity=multiplicity,
        aggregate_weight=agg_w,
        aggregate_weight_sq=agg_w2,
        feature_names=ds.feature_names,
        arm_labels=ds.arm_labels,
    )


def uncompressed(ds: Dataset) -> CompressedDataset:
    """View the dataset at raw grain: every row unique with multiplicity 1.

    This is the no-folding baseline used for benchmarking and for fits
    whose covariance needs row-level cluster identity.
    """
    n = ds.n_rows
    return CompressedDataset(
        outcome=ds.outcome,
        features=ds.features,
        arm=ds.arm,
        multiplicity=np.ones(n, dtype=np.int64),
        aggregate_weight=ds.weight,
        aggregate_weight_sq=ds.weight * ds.weight,
        feature_names=ds.feature_names,
        arm_labels=ds.arm_labels,
    )


def expand(c: CompressedDataset) -> Dataset:
    """Expand folded rows back to raw grain.

    Each unique row becomes ``multiplicity`` copies carrying the group
    mean weight; individual raw weights are not recoverable.
    """
    reps = np.asarray(c.multiplicity)
    mean_w = c.aggregate_weight / reps
    n = int(reps.sum())
    return Dataset(
        outcome=np.repeat(c.outcome, reps),
        features=np.repeat(c.features, reps, axis=0),
        weight=np.repeat(mean_w, reps),
        cluster=np.arange(n),
        period=np.zeros(n),
        arm=np.repeat(c.arm, reps),
        feature_names=c.feature_names,
        arm_labels=c.arm_labels,
    )


def compression_ratio(c: CompressedDataset) -> float:
    """Raw rows divided by unique rows; always at least 1."""
    return c.n_raw / c.n_unique


def _numeric(series: pd.Series) -> np.ndarray:
    return pd.to_numeric(series, errors="coerce").to_numpy(dtype=np.float64)


def _encode(labels: list[str], values: np.ndarray) -> np.ndarray:
    lookup = {label: i for i, label in enumerate(labels)}
    return np.fromiter((lookup[v] for v in values), dtype=np.int64, count=len(values))


def load_csv(path, schema: Schema) -> tuple[Dataset, ValidationReport]:
    """Read a CSV extract, dropping and recording unusable rows.

    Dialect: UTF-8, header row, comma separated, ``.`` decimal point,
    missing values encoded as empty fields. Rows with missing or
    unparseable required fields are dropped with reason
    ``missing-value``; rows whose weight is not strictly positive are
    dropped with reason ``non-positive-weight``. Weight defaults to 1
    when the schema names no weight column.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from None
    absent = [c for c in schema.columns if c not in frame.columns]
    if absent:
        raise DataError(f"missing required column: {', '.join(absent)}")
    n = len(frame)
    if n == 0:
        raise DataError("zero usable rows")

    outcome = _numeric(frame[schema.outcome])
    features = (
        np.column_stack([_numeric(frame[c]) for c in schema.features])
        if schema.features else np.empty((n, 0))
    )
    treatment = frame[schema.treatment].to_numpy(dtype=object)
    weight = _numeric(frame[schema.weight]) if schema.weight else np.ones(n)

    missing = np.isnan(outcome) | (treatment == "")
    if schema.features:
        missing |= np.isnan(features).any(axis=1)
    if schema.weight:
        missing |= np.isnan(weight)
    cluster_raw = None
    if schema.cluster:
        cluster_raw = frame[schema.cluster].to_numpy(dtype=object)
        missing |= cluster_raw == ""
    period = np.zeros(n)
    if schema.time:
        period = _numeric(frame[schema.time])
        missing |= np.isnan(period) | (np.mod(period, 1.0) != 0)

    bad_weight = ~missing & (weight <= 0)
    kept_mask = ~(missing | bad_weight)
    kept_idx = np.flatnonzero(kept_mask)
    if len(kept_idx) == 0:
        raise DataError("zero usable rows")

    dropped_rows: list[tuple[int, str]] = []
    for i in np.flatnonzero(~kept_mask)[:_MAX_DROP_DETAIL]:
        dropped_rows.append((int(i), REASON_MISSING if missing[i] else REASON_WEIGHT))
    by_reason = {}
    if missing.any():
        by_reason[REASON_MISSING] = int(missing.sum())
    if bad_weight.any():
        by_reason[REASON_WEIGHT] = int(bad_weight.sum())

    treatment_kept = treatment[kept_idx]
    labels = list(dict.fromkeys(treatment_kept))
    if schema.control_label is not None:
        if schema.control_label not in labels:
            raise DataError(f"control label {schema.control_label!r} not present in data")
        labels.remove(schema.control_label)
        labels.insert(0, schema.control_label)
    arm = _encode(labels, treatment_kept)

    if cluster_raw is not None:
        cluster_kept = cluster_raw[kept_idx]
        cluster = _encode(list(dict.fromkeys(cluster_kept)), cluster_kept)
    else:
        cluster = np.arange(len(kept_idx))

    summaries = {schema.outcome: _summarize(outcome[kept_idx])}
    for j, name in enumerate(schema.features):
        summaries[name] = _summarize(features[kept_idx, j])
    if schema.weight:
        summaries[schema.weight] = _summarize(weight[kept_idx])

    ds = Dataset(
        outcome=outcome[kept_idx],
        features=features[kept_idx],
        weight=weight[kept_idx],
        cluster=cluster,
        period=period[kept_idx],
        arm=arm,
        feature_names=schema.features,
        arm_labels=tuple(str(v) for v in labels),
        schema=schema,
    )
    report = ValidationReport(
        row_count=n,
        kept=len(kept_idx),
        dropped_by_reason=by_reason,
        dropped_rows=tuple(dropped_rows),
        columns=summaries,
    )
    return ds, report


def _summarize(values: np.ndarray) -> ColumnSummary:
    return ColumnSummary(
        minimum=float(values.min()),
        maximum=float(values.max()),
        mean=float(values.mean()),
        zero_fraction=float((values == 0).mean()),
    )


def write_csv(ds: Dataset, path) -> None:
    """Emit the dataset in the same CSV dialect :func:`load_csv` ingests."""
    schema = ds.schema
    if schema is None:
        raise DataError("dataset carries no schema; cannot name CSV columns")
    data: dict[str, object] = {
        schema.outcome: ds.outcome,
        schema.treatment: [ds.arm_labels[a] for a in ds.arm],
    }
    for j, name in enumerate(schema.features):
        data[name] = ds.features[:, j]
    if schema.weight:
        data[schema.weight] = ds.weight
    if schema.cluster:
        data[schema.cluster] = ds.cluster
    if schema.time:
        data[schema.time] = ds.period
    pd.DataFrame(data).to_csv(path, index=False, encoding="utf-8")
