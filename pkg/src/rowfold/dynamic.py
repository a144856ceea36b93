"""Time-dynamics of treatment effects in panel experiments.

One regression pools every (account, period) observation, interacting
treatment with a time basis — per-period indicators, a linear trend, or
a piecewise-linear trend — plus optional covariate interactions. Daily,
cumulative, and difference-of-daily effects are then linear contrasts of
the single fitted coefficient vector: extracting any number of them
triggers no further fitting, and their standard errors come from
whatever covariance the caller supplies (normally cluster-robust at the
account grain, since an account's observations repeat across periods).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceResult
from .dataset import Dataset
from .errors import DataError, EstimationError
from .linear import DesignMatrix, FitResult, fit


@dataclass(frozen=True)
class TimeBasis:
    """How calendar periods enter the model.

    ``dummies`` is the saturated basis: one indicator per period after
    the first (the first period is the reference level, absorbed by the
    non-time terms). ``linear`` is a single trend centered at the first
    period. ``piecewise`` is that trend plus one hinge max(0, t − knot)
    per knot, giving a continuous broken line.
    """

    kind: str
    periods: tuple[int, ...]
    knots: tuple[float, ...] = ()

    def __post_init__(self):
        periods = tuple(sorted({int(p) for p in self.periods}))
        object.__setattr__(self, "periods", periods)
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        if self.kind not in ("dummies", "linear", "piecewise"):
            raise EstimationError(f"unknown time basis kind: {self.kind!r}")
        if len(periods) < 2:
            raise DataError("a time basis needs at least two distinct periods")
        if self.kind == "piecewise":
            if not self.knots:
                raise EstimationError("piecewise basis needs at least one knot")
            lo, hi = periods[0], periods[-1]
            if any(not lo < k < hi for k in self.knots):
                raise EstimationError("knots must lie strictly inside the period range")

    @classmethod
    def dummies(cls, periods) -> "TimeBasis":
        return cls(kind="dummies", periods=tuple(periods))

    @classmethod
    def linear(cls, periods) -> "TimeBasis":
        return cls(kind="linear", periods=tuple(periods))

    @classmethod
    def piecewise(cls, periods, knots) -> "TimeBasis":
        return cls(kind="piecewise", periods=tuple(periods), knots=tuple(knots))

    @property
    def labels(self) -> tuple[str, ...]:
        if self.kind == "dummies":
            return tuple(f"t{p}" for p in self.periods[1:])
        if self.kind == "linear":
            return ("trend",)
        return ("trend", *(f"hinge{k:g}" for k in self.knots))

    def values(self, t) -> np.ndarray:
        """Basis row f(t) for a single period."""
        t = float(t)
        if self.kind == "dummies":
            if int(t) not in self.periods:
                raise EstimationError(
                    f"period {t:g} is outside the fitted periods {self.periods}"
                )
            return (np.array(self.periods[1:], dtype=np.float64) == t).astype(np.float64)
        t0 = self.periods[0]
        if self.kind == "linear":
            return np.array([t - t0])
        return np.array([t - t0, *(max(0.0, t - k) for k in self.knots)])

    def matrix(self, periods) -> np.ndarray:
        return np.vstack([self.values(t) for t in np.asarray(periods).ravel()])


@dataclass(frozen=True)
class PanelDesign:
    """A panel design matrix plus the context contrasts need later."""

    design: DesignMatrix
    basis: TimeBasis
    features: tuple[str, ...]
    feature_means: dict[str, float]
    arm_labels: tuple[str, ...]
    cluster: np.ndarray


def build_panel_design(
    ds: Dataset, basis: TimeBasis, features: tuple[str, ...] = ()
) -> PanelDesign:
    """Assemble the pooled panel design at raw (account, period) grain.

    Term groups, in column order: intercept; treatment indicators;
    covariates; time basis; treatment x covariate; treatment x time;
    covariate x time; treatment x covariate x time. Folding is not
    applied — each row keeps its account identity so cluster-robust
    covariances stay available.
    """
    features = tuple(features)
    index = {name: j for j, name in enumerate(ds.feature_names)}
    unknown = [f for f in features if f not in index]
    if unknown:
        raise DataError(f"unknown feature: {', '.join(unknown)}")
    observed = tuple(sorted(set(int(p) for p in ds.period)))
    missing = [p for p in observed if p not in basis.periods]
    if missing:
        raise DataError(f"periods {missing} in data but not in the time basis")

    n = ds.n_rows
    time_cols = basis.matrix(ds.period)
    arms = [
        (label, (ds.arm == code).astype(np.float64))
        for code, label in enumerate(ds.arm_labels)
        if code > 0
    ]
    feats = [(name, ds.features[:, index[name]]) for name in features]
    tlabels = basis.labels

    cols: list[np.ndarray] = [np.ones(n)]
    names: list[str] = ["intercept"]
    groups: dict[str, list[int]] = {"intercept": [0]}

    def emit(group: str, name: str, values: np.ndarray) -> None:
        groups.setdefault(group, []).append(len(cols))
        cols.append(values)
        names.append(name)

    for label, ind in arms:
        emit("treat", f"treat[{label}]", ind)
    for fname, x in feats:
        emit("cov", fname, x)
    for j, tl in enumerate(tlabels):
        emit("time", f"time[{tl}]", time_cols[:, j])
    for (label, ind), (fname, x) in itertools.product(arms, feats):
        emit("treat:cov", f"treat[{label}]:{fname}", ind * x)
    for (label, ind), (j, tl) in itertools.product(arms, enumerate(tlabels)):
        emit("treat:time", f"treat[{label}]:time[{tl}]", ind * time_cols[:, j])
    for (fname, x), (j, tl) in itertools.product(feats, enumerate(tlabels)):
        emit("cov:time", f"{fname}:time[{tl}]", x * time_cols[:, j])
    for (label, ind), (fname, x), (j, tl) in itertools.product(
        arms, feats, enumerate(tlabels)
    ):
        emit("treat:cov:time", f"treat[{label}]:{fname}:time[{tl}]", ind * x * time_cols[:, j])

    design = DesignMatrix(
        matrix=np.column_stack(cols),
        outcome=ds.outcome,
        row_weight=ds.weight,
        row_weight_sq=ds.weight * ds.weight,
        multiplicity=np.ones(n, dtype=np.int64),
        column_names=tuple(names),
        n_raw=n,
        arm=ds.arm,
        groups={k: tuple(v) for k, v in groups.items()},
    )
    means = {name: float(x.mean()) for name, x in feats}
    return PanelDesign(
        design=design,
        basis=basis,
        features=features,
        feature_means=means,
        arm_labels=ds.arm_labels,
        cluster=ds.cluster,
    )


@dataclass(frozen=True)
class PanelFit:
    """One fitted panel model; every effect below is a contrast of it."""

    result: FitResult
    panel: PanelDesign


def fit_panel(panel: PanelDesign) -> PanelFit:
    return PanelFit(result=fit(panel.design), panel=panel)


@dataclass(frozen=True)
class EffectEstimate:
    """A scalar treatment-effect contrast.

    ``at`` records the covariate values the contrast was evaluated at
    (sample means unless the caller overrode them); ``se`` is present
    when a covariance was supplied.
    """

    estimate: float
    contrast: np.ndarray
    at: dict[str, float]
    se: float | None = None


def _resolve_arm(pfit: PanelFit, arm_label: str | None) -> str:
    treated = pfit.panel.arm_labels[1:]
    if arm_label is None:
        if len(treated) != 1:
            raise EstimationError("several treated arms; name one")
        return treated[0]
    if arm_label not in treated:
        raise EstimationError(f"no treated arm labeled {arm_label!r}")
    return arm_label


def _contrast_at(
    pfit: PanelFit, t, arm_label: str | None, at: dict[str, float] | None
) -> tuple[np.ndarray, dict[str, float]]:
    """Contrast selecting the treated−control gap at period t.

    Picks up the treatment main effect, the treatment x time terms at
    f(t), and — when covariates are in the model — the treatment x
    covariate terms at the requested covariate values.
    """
    panel = pfit.panel
    label = _resolve_arm(pfit, arm_label)
    names = pfit.result.column_names
    idx = {name: j for j, name in enumerate(names)}
    used = dict(panel.feature_means)
    used.update(at or {})
    extra = set(used) - set(panel.features)
    if extra:
        raise EstimationError(f"covariate values given for terms not in the model: {sorted(extra)}")

    c = np.zeros(len(names))
    c[idx[f"treat[{label}]"]] = 1.0
    f_t = panel.basis.values(t)
    for j, tl in enumerate(panel.basis.labels):
        c[idx[f"treat[{label}]:time[{tl}]"]] = f_t[j]
    for fname in panel.features:
        x = used[fname]
        c[idx[f"treat[{label}]:{fname}"]] = x
        for j, tl in enumerate(panel.basis.labels):
            c[idx[f"treat[{label}]:{fname}:time[{tl}]"]] = x * f_t[j]
    return c, {k: used[k] for k in panel.features}


def _finish(
    pfit: PanelFit, c: np.ndarray, at: dict[str, float], cov: CovarianceResult | None
) -> EffectEstimate:
    se = None
    if cov is not None:
        se = float(np.sqrt(c @ cov.matrix @ c))
    return EffectEstimate(
        estimate=float(c @ pfit.result.beta), contrast=c, at=at, se=se
    )


def daily_effect(
    pfit: PanelFit,
    t,
    cov: CovarianceResult | None = None,
    arm_label: str | None = None,
    at: dict[str, float] | None = None,
) -> EffectEstimate:
    """Treated−control effect at period ``t``. No refit."""
    c, used = _contrast_at(pfit, t, arm_label, at)
    return _finish(pfit, c, used, cov)


def cumulative_effect(
    pfit: PanelFit,
    through,
    cov: CovarianceResult | None = None,
    arm_label: str | None = None,
    at: dict[str, float] | None = None,
) -> EffectEstimate:
    """Average of the daily effects over all fitted periods ≤ ``through``.

    For a cumulative total rather than a per-period average, multiply by
    the number of periods included.
    """
    periods = [p for p in pfit.panel.basis.periods if p <= through]
    if not periods:
        raise EstimationError(f"no fitted period at or before {through}")
    rows = [_contrast_at(pfit, p, arm_label, at) for p in periods]
    c = np.mean([r[0] for r in rows], axis=0)
    return _finish(pfit, c, rows[0][1], cov)


def difference_of_daily(
    pfit: PanelFit,
    t1,
    t2,
    cov: CovarianceResult | None = None,
    arm_label: str | None = None,
    at: dict[str, float] | None = None,
) -> EffectEstimate:
    """Daily effect at ``t1`` minus daily effect at ``t2``. No refit."""
    c1, used = _contrast_at(pfit, t1, arm_label, at)
    c2, _ = _contrast_at(pfit, t2, arm_label, at)
    return _finish(pfit, c1 - c2, used, cov)
