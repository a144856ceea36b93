"""Covariance estimators for fitted models: conventional, robust, clustered.

All three run on the folded fit state. The heteroskedasticity-robust
meat uses the per-row sum of squared raw weights, which makes the folded
computation bit-for-bit equivalent to the raw-grain one even when
analytic weights differ inside a fold group. Cluster-robust covariance
needs one cluster id per design row, so it is normally computed from a
fit at raw grain (or any folding that never merges rows across
clusters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats
from scipy.linalg import cho_factor, cho_solve

from .errors import EstimationError
from .linear import FitResult


@dataclass(frozen=True)
class CovarianceResult:
    """A (p, p) coefficient covariance with its sampling-theory context.

    ``dof`` is the degrees of freedom a t reference distribution should
    use: residual dof for conventional and heteroskedasticity-robust
    kinds, clusters minus one for clustered kinds.
    """

    matrix: np.ndarray
    kind: str
    dof: int
    n_clusters: int | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.matrix))


def _bread(result: FitResult) -> np.ndarray:
    """(MᵀWM)⁻¹ via the scaled Cholesky factorization."""
    moment = result.moment
    scale = np.sqrt(np.diag(moment))
    normalized = moment / np.outer(scale, scale)
    try:
        factor = cho_factor(normalized)
    except np.linalg.LinAlgError:  # fit() already screened; belt and braces
        raise EstimationError("moment matrix is not positive definite") from None
    inv = cho_solve(factor, np.eye(len(scale)))
    return inv / np.outer(scale, scale)


def cov_iid(result: FitResult) -> CovarianceResult:
    """Conventional WLS covariance sigma² (MᵀWM)⁻¹.

    sigma² is the weighted residual sum of squares over raw-row degrees
    of freedom. Exact for homoskedastic errors with variance inversely
    proportional to the analytic weight.
    """
    sigma2 = result.weighted_rss / result.dof
    return CovarianceResult(matrix=sigma2 * _bread(result), kind="iid", dof=result.dof)


def cov_white(result: FitResult, correction: str = "hc1") -> CovarianceResult:
    """Heteroskedasticity-robust sandwich covariance.

    The meat accumulates sum(w_i²) e_j² m_j m_jᵀ over unique rows, where
    sum(w_i²) is taken over the raw rows folded into row j — identical
    rows share the residual e_j, so this equals the raw-grain sum of
    (w_i e_i)² m_i m_iᵀ exactly. ``correction`` "hc0" is the plain
    estimator, "hc1" applies the N/(N−p) small-sample factor.
    """
    if correction not in ("hc0", "hc1"):
        raise EstimationError(f"unknown correction: {correction!r}")
    design = result.design
    scores = design.matrix * (np.sqrt(design.row_weight_sq) * result.residuals)[:, None]
    meat = scores.T @ scores
    bread = _bread(result)
    matrix = bread @ meat @ bread
    if correction == "hc1":
        matrix = matrix * (result.n_raw / result.dof)
    return CovarianceResult(matrix=matrix, kind=correction, dof=result.dof)


def cov_cluster(
    result: FitResult, cluster: np.ndarray, correction: str = "cr1"
) -> CovarianceResult:
    """Cluster-robust sandwich covariance (one score per cluster).

    ``cluster`` must hold one id per design row; rows folded together
    must therefore come from a single cluster, which holds trivially for
    a raw-grain fit. ``correction`` "cr0" is the plain estimator, "cr1"
    applies G/(G−1) · (N−1)/(N−p).
    """
    if correction not in ("cr0", "cr1"):
        raise EstimationError(f"unknown correction: {correction!r}")
    design = result.design
    cluster = np.asarray(cluster)
    if len(cluster) != design.n_unique:
        raise EstimationError(
            "cluster ids must align with design rows; "
            f"got {len(cluster)} ids for {design.n_unique} rows"
        )
    _, codes = np.unique(cluster, return_inverse=True)
    n_clusters = int(codes.max()) + 1
    if n_clusters < 2:
        raise EstimationError("cluster-robust covariance needs at least two clusters")

    weighted_resid = design.row_weight * result.residuals
    p = result.n_columns
    scores = np.zeros((n_clusters, p))
    for j in range(p):
        scores[:, j] = np.bincount(
            codes, weights=weighted_resid * design.matrix[:, j], minlength=n_clusters
        )
    meat = scores.T @ scores
    bread = _bread(result)
    matrix = bread @ meat @ bread
    if correction == "cr1":
        n = result.n_raw
        matrix = matrix * (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - p))
    return CovarianceResult(
        matrix=matrix, kind=correction, dof=n_clusters - 1, n_clusters=n_clusters
    )


def summarize(
    result: FitResult, cov: CovarianceResult, level: float = 0.95
) -> pd.DataFrame:
    """Per-coefficient table: estimate, SE, t, p, confidence bounds.

    Inference uses a t reference with the covariance's degrees of
    freedom.
    """
    if not 0 < level < 1:
        raise EstimationError("confidence level must be inside (0, 1)")
    se = cov.se
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stat = np.where(se > 0, result.beta / se, np.nan)
    p_value = 2 * stats.t.sf(np.abs(t_stat), df=cov.dof)
    half = stats.t.ppf(0.5 + level / 2, df=cov.dof) * se
    return pd.DataFrame(
        {
            "estimate": result.beta,
            "std_error": se,
            "t_stat": t_stat,
            "p_value": p_value,
            "ci_low": result.beta - half,
            "ci_high": result.beta + half,
        },
        index=pd.Index(result.column_names, name="term"),
    )
