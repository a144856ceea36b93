"""Normal-normal shrinkage for effect estimates across many experiments.

A fitted effect (or vector of arm effects) with its sampling covariance
is combined with a normal prior by precision addition — the conjugate
update. The prior itself can be estimated from a history of comparable
experiments by moment matching: the spread of past estimates minus the
part explained by their sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, EstimationError

_COND_LIMIT = 1e12
_RIDGE = 1e-12


@dataclass(frozen=True)
class NormalPrior:
    """Multivariate normal prior on effect coefficients."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (len(mean), len(mean)):
            raise EstimationError("prior covariance shape does not match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class Posterior:
    """Conjugate posterior, with a record of any numerical adjustment.

    ``adjustments`` names each covariance that had to be ridge-stabilized
    before inversion; it is empty in the well-conditioned case.
    """

    mean: np.ndarray
    cov: np.ndarray
    prior: NormalPrior
    adjustments: tuple[str, ...] = ()


def _precision(cov: np.ndarray, label: str, adjustments: list[str]) -> np.ndarray:
    """Invert a covariance, ridging it first if numerically singular."""
    k = cov.shape[0]
    bad = not np.isfinite(cov).all()
    if not bad:
        bad = np.linalg.cond(cov) > _COND_LIMIT
    if bad:
        scale = max(float(np.trace(cov)) / k, 1.0)
        cov = cov + (_RIDGE * scale) * np.eye(k)
        adjustments.append(f"{label}-ridged")
    return np.linalg.inv(cov)


def shrink(estimate, cov, prior: NormalPrior) -> Posterior:
    """Combine an estimate and its covariance with a normal prior.

    Posterior precision is the sum of prior and likelihood precisions;
    the posterior mean is the precision-weighted blend of prior mean and
    estimate. Scalars are accepted for one-dimensional effects.
    """
    est = np.atleast_1d(np.asarray(estimate, dtype=np.float64))
    like_cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    k = len(est)
    if like_cov.shape != (k, k):
        raise EstimationError("estimate covariance shape does not match estimate")
    if len(prior.mean) != k:
        raise EstimationError("prior dimension does not match estimate")

    adjustments: list[str] = []
    lam_prior = _precision(prior.cov, "prior-cov", adjustments)
    lam_like = _precision(like_cov, "estimate-cov", adjustments)
    lam_post = lam_prior + lam_like
    post_cov = _precision(lam_post, "posterior-precision", adjustments)
    post_mean = post_cov @ (lam_prior @ prior.mean + lam_like @ est)
    return Posterior(
        mean=post_mean, cov=post_cov, prior=prior, adjustments=tuple(adjustments)
    )


def empirical_prior(estimates, std_errors) -> NormalPrior:
    """Moment-matched prior from a history of one-dimensional estimates.

    Prior mean is the precision-weighted average of past estimates.
    Prior variance is the excess of their sample variance over the mean
    squared standard error, floored at zero — the part of the historical
    spread not attributable to sampling noise. Requires at least five
    past experiments.
    """
    est = np.asarray(estimates, dtype=np.float64)
    se = np.asarray(std_errors, dtype=np.float64)
    if est.ndim != 1 or est.shape != se.shape:
        raise DataError("estimates and standard errors must be equal-length vectors")
    if len(est) < 5:
        raise DataError(f"prior estimation needs at least 5 past experiments, got {len(est)}")
    if not np.isfinite(est).all() or not np.isfinite(se).all() or (se <= 0).any():
        raise DataError("estimates must be finite with strictly positive standard errors")
    precision = 1.0 / (se * se)
    mean = float(precision @ est / precision.sum())
    variance = max(0.0, float(np.var(est, ddof=1)) - float(np.mean(se * se)))
    return NormalPrior(mean=np.array([mean]), cov=np.array([[variance]]))


def prob_best_arm(
    mean,
    cov,
    n_draws: int = 100_000,
    seed: int = 0,
    include_control: bool = True,
) -> np.ndarray:
    """Monte Carlo probability that each arm has the largest effect.

    ``mean``/``cov`` describe the joint posterior of treated-arm effects
    relative to control. With ``include_control`` the zero effect enters
    as candidate 0, so the returned vector is [control, arm1, ...];
    otherwise only the treated arms compete. Ties go to the lower index.
    The probabilities are adjusted to sum to exactly 1.0.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    k = len(mean)
    if cov.shape != (k, k):
        raise EstimationError("covariance shape does not match mean")
    if n_draws < 1:
        raise EstimationError("need at least one draw")
    if k == 1 and not include_control:
        return np.array([1.0])

    # Eigendecomposition handles positive semi-definite posteriors
    # (degenerate directions get zero spread rather than an error).
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2.0)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    rng = np.random.Generator(np.random.Philox(seed))
    draws = mean + rng.standard_normal((n_draws, k)) @ root.T
    if include_control:
        draws = np.hstack([np.zeros((n_draws, 1)), draws])
    winner = np.argmax(draws, axis=1)  # ties resolve to the lower index
    probs = np.bincount(winner, minlength=draws.shape[1]) / float(n_draws)

    for _ in range(5):  # float touch-up so the vector sums to exactly 1.0
        gap = 1.0 - probs.sum()
        if gap == 0.0:
            break
        probs[np.argmax(probs)] += gap
    return probs
