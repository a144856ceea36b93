"""Synthetic experiment generators with known ground truth.

Every generator attaches a ``truth`` record to the returned
:class:`~rowfold.dataset.Dataset` so calibration studies can score
estimates against the parameters that produced the data. Randomness
comes from the counter-based Philox bit generator seeded through
``SeedSequence``, which gives identical streams across platforms and
lets replicate r of a study derive its own independent stream from
(seed, r) without sharing state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .covariance import cov_cluster, cov_iid, cov_white
from .dataset import Dataset, compress, uncompressed
from .dynamic import TimeBasis, build_panel_design, cumulative_effect, fit_panel
from .errors import DataError, EstimationError
from .linear import ModelSpec, build_design, fit

_NOISE_KINDS = ("homoskedastic", "heteroskedastic", "zero_inflated")
_PANEL_ERRORS = ("ar1", "equicorrelated")
_EFFECT_PATHS = ("flat", "linear", "diminishing")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key)))
    )


def _quantize(values: np.ndarray, levels: int) -> np.ndarray:
    """Snap values onto an evenly spaced grid of at most ``levels`` points."""
    lo, hi = float(values.min()), float(values.max())
    if levels < 2 or hi == lo:
        return np.full_like(values, lo)
    step = (hi - lo) / (levels - 1)
    return lo + np.round((values - lo) / step) * step


def gen_ab(
    n: int,
    effect: float,
    seed: int,
    noise: str = "homoskedastic",
    baseline: float = 10.0,
    sigma: float = 1.0,
    weight_spread: float = 1.0,
    variance_power: float = 1.0,
    zero_rate: float = 0.6,
    cardinality: int | None = None,
) -> Dataset:
    """Two-arm experiment with a known effect, one row per account.

    Noise regimes:

    - ``homoskedastic``: outcome = baseline + effect·treated + sigma·N(0,1),
      unit weights.
    - ``heteroskedastic``: each row carries an analytic weight
      w ~ LogNormal(0, weight_spread) and noise variance
      sigma²·w^(−variance_power). At power 1 the weighted fit's
      conventional covariance is correctly calibrated; at power 2 it is
      not, while the heteroskedasticity-robust one stays on target.
    - ``zero_inflated``: outcome is 0 with probability zero_rate, else
      Exponential with scale baseline (+effect in the treated arm). The
      treatment shifts upper quantiles but leaves the zero mass alone.

    ``cardinality`` optionally snaps outcomes onto a grid with that many
    levels, which controls how strongly the rows fold.
    """
    if noise not in _NOISE_KINDS:
        raise EstimationError(f"unknown noise kind: {noise!r}")
    if n < 4:
        raise DataError("need at least 4 rows")
    rng = _rng(seed, 0)

    treat = np.zeros(n, dtype=np.int64)
    treat[rng.permutation(n)[: n // 2]] = 1
    weight = np.ones(n)
    truth: dict = {
        "kind": "ab", "n": n, "effect": float(effect), "baseline": float(baseline),
        "noise": noise, "sigma": float(sigma), "cardinality": cardinality,
    }

    if noise == "zero_inflated":
        if not 0.0 <= zero_rate < 1.0:
            raise EstimationError("zero_rate must lie in [0, 1)")
        scale_c, scale_t = baseline, baseline + effect
        if min(scale_c, scale_t) <= 0:
            raise EstimationError("exponential scales must stay positive")
        scale = np.where(treat == 1, scale_t, scale_c)
        y = np.where(
            rng.random(n) < zero_rate, 0.0, rng.exponential(1.0, n) * scale
        )
        truth.update(
            zero_rate=float(zero_rate), scale_control=float(scale_c),
            scale_treated=float(scale_t),
            mean_effect=float((1 - zero_rate) * (scale_t - scale_c)),
        )
    else:
        eps = rng.standard_normal(n)
        if noise == "heteroskedastic":
            weight = rng.lognormal(0.0, weight_spread, n)
            noise_sd = sigma * weight ** (-variance_power / 2.0)
            truth.update(
                weight_spread=float(weight_spread),
                variance_power=float(variance_power),
            )
        else:
            noise_sd = sigma
        y = baseline + effect * treat + noise_sd * eps
        truth["mean_effect"] = float(effect)

    if cardinality is not None:
        y = _quantize(y, int(cardinality))

    return Dataset(
        outcome=y,
        features=np.empty((n, 0)),
        weight=weight,
        cluster=np.arange(n),
        period=np.zeros(n),
        arm=treat,
        feature_names=(),
        arm_labels=("control", "treatment"),
        truth=truth,
    )


def zero_inflated_quantile(scale: float, rate: float, tau: float) -> float:
    """Exact tau-quantile of the zero-inflated exponential mixture."""
    if tau <= rate:
        return 0.0
    return float(-scale * np.log((1.0 - tau) / (1.0 - rate)))


def true_qte(truth: dict, tau: float) -> float:
    """Ground-truth quantile treatment effect for a generated dataset."""
    if truth.get("noise") == "zero_inflated":
        rate = truth["zero_rate"]
        return zero_inflated_quantile(truth["scale_treated"], rate, tau) - (
            zero_inflated_quantile(truth["scale_control"], rate, tau)
        )
    # location-shift regimes move every quantile by the mean effect
    return float(truth["effect"])


def gen_panel(
    n_accounts: int,
    n_periods: int,
    effect: float,
    seed: int,
    effect_path: str = "flat",
    error: str = "ar1",
    rho: float = 0.5,
    sigma: float = 1.0,
    baseline: float = 10.0,
) -> Dataset:
    """Panel experiment: every account observed in every period.

    Accounts are randomized once; the per-period effect follows
    ``effect_path`` (constant, ramping linearly from zero, or decaying
    geometrically). Errors are dependent within account — stationary
    AR(1) across periods or equicorrelated via a shared account shock —
    with marginal variance sigma² either way, so conventional standard
    errors that ignore the dependence are genuinely miscalibrated.
    """
    if error not in _PANEL_ERRORS:
        raise EstimationError(f"unknown error structure: {error!r}")
    if effect_path not in _EFFECT_PATHS:
        raise EstimationError(f"unknown effect path: {effect_path!r}")
    if not 0.0 <= rho < 1.0:
        raise EstimationError("rho must lie in [0, 1)")
    if n_accounts < 4 or n_periods < 2:
        raise DataError("need at least 4 accounts and 2 periods")
    rng = _rng(seed, 1)

    t = np.arange(n_periods)
    if effect_path == "flat":
        daily = np.full(n_periods, float(effect))
    elif effect_path == "linear":
        daily = effect * t / (n_periods - 1)
    else:
        daily = effect * 0.5 ** t

    treated_accounts = np.zeros(n_accounts, dtype=np.int64)
    treated_accounts[rng.permutation(n_accounts)[: n_accounts // 2]] = 1

    shocks = rng.standard_normal((n_accounts, n_periods))
    if error == "ar1":
        errs = np.empty((n_accounts, n_periods))
        errs[:, 0] = shocks[:, 0]
        adj = np.sqrt(1.0 - rho * rho)
        for s in range(1, n_periods):
            errs[:, s] = rho * errs[:, s - 1] + adj * shocks[:, s]
        errs *= sigma
    else:
        shared = rng.standard_normal(n_accounts)[:, None]
        errs = sigma * (np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * shocks)

    y = baseline + treated_accounts[:, None] * daily[None, :] + errs
    account = np.repeat(np.arange(n_accounts), n_periods)
    return Dataset(
        outcome=y.ravel(),
        features=np.empty((n_accounts * n_periods, 0)),
        weight=np.ones(n_accounts * n_periods),
        cluster=account,
        period=np.tile(t, n_accounts),
        arm=np.repeat(treated_accounts, n_periods),
        feature_names=(),
        arm_labels=("control", "treatment"),
        truth={
            "kind": "panel", "n_accounts": n_accounts, "n_periods": n_periods,
            "effect": float(effect), "effect_path": effect_path,
            "daily_effects": tuple(float(d) for d in daily),
            "error": error, "rho": float(rho), "sigma": float(sigma),
            "baseline": float(baseline),
        },
    )


@dataclass(frozen=True)
class CoverageRow:
    """Calibration result for one interval estimator."""

    tag: str
    coverage: float
    mean_width: float
    n_reps: int
    level: float


def _ab_intervals(ds: Dataset, estimators, level: float) -> dict[str, tuple[float, float]]:
    weighted = ds.truth.get("noise") == "heteroskedastic"
    spec = ModelSpec(weight_source="column" if weighted else "none")
    result = fit(build_design(compress(ds), spec))
    j = result.column_names.index("treat[treatment]")
    out = {}
    for tag in estimators:
        if tag == "iid":
            cov = cov_iid(result)
        elif tag in ("hc0", "hc1"):
            cov = cov_white(result, correction=tag)
        else:
            raise EstimationError(f"estimator {tag!r} not available for an ab study")
        half = stats.t.ppf(0.5 + level / 2, df=cov.dof) * cov.se[j]
        out[tag] = (result.beta[j] - half, result.beta[j] + half)
    return out


def _panel_intervals(ds: Dataset, estimators, level: float) -> dict[str, tuple[float, float]]:
    basis = TimeBasis.dummies(sorted(set(ds.period.tolist())))
    panel = build_panel_design(ds, basis)
    pfit = fit_panel(panel)
    out = {}
    for tag in estimators:
        if tag == "iid":
            cov = cov_iid(pfit.result)
        elif tag in ("hc0", "hc1"):
            cov = cov_white(pfit.result, correction=tag)
        elif tag in ("cr0", "cr1"):
            cov = cov_cluster(pfit.result, panel.cluster, correction=tag)
        else:
            raise EstimationError(f"unknown estimator tag: {tag!r}")
        eff = cumulative_effect(pfit, through=panel.basis.periods[-1], cov=cov)
        half = stats.t.ppf(0.5 + level / 2, df=cov.dof) * eff.se
        out[tag] = (eff.estimate - half, eff.estimate + half)
    return out


def coverage_study(
    scenario: str,
    estimators: tuple[str, ...],
    n_reps: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    **gen_kwargs,
) -> dict[str, CoverageRow]:
    """Interval-calibration study over repeated simulated experiments.

    One generation loop scores every requested estimator on the same
    draws, so their coverages are directly comparable. ``scenario`` is
    "ab" (cross-sectional, target = the mean effect) or "panel"
    (target = the per-period average of the true daily effects).
    Replicate r draws its seed from a spawned child of ``seed``.
    """
    if scenario not in ("ab", "panel"):
        raise EstimationError(f"unknown scenario: {scenario!r}")
    if n_reps < 1:
        raise EstimationError("need at least one replicate")
    estimators = tuple(estimators)
    rep_seeds = np.random.SeedSequence(int(seed)).generate_state(n_reps, dtype=np.uint64)

    hits = {tag: 0 for tag in estimators}
    widths = {tag: 0.0 for tag in estimators}
    for r in range(n_reps):
        rep_seed = int(rep_seeds[r])
        if scenario == "ab":
            ds = gen_ab(seed=rep_seed, **gen_kwargs)
            target = ds.truth["mean_effect"]
            intervals = _ab_intervals(ds, estimators, level)
        else:
            ds = gen_panel(seed=rep_seed, **gen_kwargs)
            target = float(np.mean(ds.truth["daily_effects"]))
            intervals = _panel_intervals(ds, estimators, level)
        for tag, (lo, hi) in intervals.items():
            hits[tag] += int(lo <= target <= hi)
            widths[tag] += hi - lo

    return {
        tag: CoverageRow(
            tag=tag,
            coverage=hits[tag] / n_reps,
            mean_width=widths[tag] / n_reps,
            n_reps=n_reps,
            level=level,
        )
        for tag in estimators
    }
