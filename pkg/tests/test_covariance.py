import numpy as np
import pytest
import statsmodels.api as sm

from rowfold import (
    Dataset,
    EstimationError,
    ModelSpec,
    build_design,
    compress,
    cov_cluster,
    cov_iid,
    cov_white,
    fit,
    summarize,
    uncompressed,
)


def simple(outcome, arm, weight=None, cluster=None):
    n = len(outcome)
    return Dataset(
        outcome=np.asarray(outcome, dtype=float),
        features=np.empty((n, 0)),
        weight=np.ones(n) if weight is None else np.asarray(weight, dtype=float),
        cluster=np.arange(n) if cluster is None else np.asarray(cluster),
        period=np.zeros(n),
        arm=np.asarray(arm),
        feature_names=(),
        arm_labels=("control", "treatment") if max(arm) else ("control",),
    )


def random_fit(seed=0, n=400, weighted=True):
    rng = np.random.default_rng(seed)
    arm = rng.integers(0, 2, n)
    arm[:2] = [0, 1]
    w = rng.uniform(0.3, 3.0, n) if weighted else np.ones(n)
    y = 1.0 + 0.8 * arm + rng.normal(size=n) * rng.uniform(0.5, 2.0, n)
    ds = simple(y, arm, weight=w)
    design = build_design(uncompressed(ds), ModelSpec())
    return ds, fit(design)


# ---------------------------------------------------------------------------
# hand-checkable values


def test_iid_variance_of_a_mean():
    # intercept-only on y = (0, 2): sigma^2 = 2, var(mean) = 1, se = 1
    ds = simple([0.0, 2.0], [0, 0])
    result = fit(build_design(uncompressed(ds), ModelSpec(treatment=False)))
    cov = cov_iid(result)
    assert cov.matrix[0, 0] == pytest.approx(1.0, abs=1e-14)
    assert cov.dof == 1


def test_white_hand_example():
    # same data: meat = sum e_i^2 = 2, bread = 1/2 -> hc0 var = 0.5
    ds = simple([0.0, 2.0], [0, 0])
    result = fit(build_design(uncompressed(ds), ModelSpec(treatment=False)))
    hc0 = cov_white(result, correction="hc0")
    assert hc0.matrix[0, 0] == pytest.approx(0.5, abs=1e-14)
    assert np.sqrt(0.5) == pytest.approx(0.7071067811865476)
    # hc1 multiplies by n/(n-p) = 2
    hc1 = cov_white(result, correction="hc1")
    assert hc1.matrix[0, 0] == pytest.approx(1.0, abs=1e-14)


def test_cr1_small_sample_factor():
    rng = np.random.default_rng(1)
    n, g = 1000, 50
    cluster = np.repeat(np.arange(g), n // g)
    arm = np.repeat(rng.integers(0, 2, g), n // g)
    arm[: n // g] = 0
    arm[n // g : 2 * (n // g)] = 1
    y = rng.normal(size=n) + arm
    ds = simple(y, arm, cluster=cluster)
    result = fit(build_design(uncompressed(ds), ModelSpec()))
    cr0 = cov_cluster(result, ds.cluster, correction="cr0")
    cr1 = cov_cluster(result, ds.cluster, correction="cr1")
    factor = (50 / 49) * (999 / 998)
    np.testing.assert_allclose(cr1.matrix, cr0.matrix * factor, rtol=1e-13)
    assert cr1.dof == 49
    assert cr1.n_clusters == 50


# ---------------------------------------------------------------------------
# independent-implementation checks


def test_iid_matches_wls_oracle():
    rng = np.random.default_rng(5)
    n = 300
    arm = rng.integers(0, 2, n)
    arm[:2] = [0, 1]
    w = rng.uniform(0.5, 2.0, n)
    y = 1.0 + arm + rng.normal(size=n) / np.sqrt(w)
    ds = simple(y, arm, weight=w)
    result = fit(build_design(compress(ds), ModelSpec()))
    ref = sm.WLS(y, sm.add_constant(arm.astype(float)), weights=w).fit()
    np.testing.assert_allclose(cov_iid(result).se, ref.bse, rtol=1e-10)


@pytest.mark.parametrize("kind", ["HC0", "HC1"])
def test_white_matches_ols_oracle(kind):
    _, result = random_fit(seed=9, weighted=False)
    design = result.design
    ref = sm.OLS(design.outcome, design.matrix).fit(cov_type=kind)
    ours = cov_white(result, correction=kind.lower())
    np.testing.assert_allclose(ours.se, ref.bse, rtol=1e-10)


def test_white_weighted_matches_oracle():
    ds, result = random_fit(seed=13, weighted=True)
    ref = sm.WLS(ds.outcome, result.design.matrix, weights=ds.weight).fit(cov_type="HC0")
    ours = cov_white(result, correction="hc0")
    np.testing.assert_allclose(ours.se, ref.bse, rtol=1e-10)


def test_cluster_matches_oracle():
    rng = np.random.default_rng(21)
    n, g = 600, 40
    cluster = np.repeat(np.arange(g), n // g)
    arm = np.repeat((np.arange(g) % 2), n // g)
    shock = np.repeat(rng.normal(size=g), n // g)
    y = 1.0 + 0.5 * arm + shock + rng.normal(size=n)
    ds = simple(y, arm, cluster=cluster)
    result = fit(build_design(uncompressed(ds), ModelSpec()))
    ref = sm.OLS(y, result.design.matrix).fit(
        cov_type="cluster", cov_kwds={"groups": cluster}
    )
    ours = cov_cluster(result, ds.cluster, correction="cr1")
    np.testing.assert_allclose(ours.se, ref.bse, rtol=1e-10)


def test_white_on_folded_rows_equals_raw_when_weights_vary_within_group():
    """The aggregate of squared weights makes the folded meat exact."""
    rng = np.random.default_rng(33)
    n = 1500
    y = rng.integers(0, 4, n).astype(float)
    arm = rng.integers(0, 2, n)
    arm[:2] = [0, 1]
    w = rng.uniform(0.2, 5.0, n)
    ds = simple(y, arm, weight=w)
    raw = fit(build_design(uncompressed(ds), ModelSpec()))
    folded = fit(build_design(compress(ds), ModelSpec()))
    for corr in ("hc0", "hc1"):
        np.testing.assert_allclose(
            cov_white(raw, corr).matrix, cov_white(folded, corr).matrix, rtol=1e-11
        )


# ---------------------------------------------------------------------------
# interface behavior


def test_cluster_needs_aligned_ids():
    _, result = random_fit(seed=2)
    with pytest.raises(EstimationError, match="align"):
        cov_cluster(result, np.arange(7))


def test_cluster_needs_two_clusters():
    ds, result = random_fit(seed=2)
    with pytest.raises(EstimationError, match="two clusters"):
        cov_cluster(result, np.zeros(ds.n_rows, dtype=int))


def test_unknown_corrections_rejected():
    _, result = random_fit(seed=2)
    with pytest.raises(EstimationError):
        cov_white(result, correction="hc9")
    with pytest.raises(EstimationError):
        cov_cluster(result, np.arange(result.n_raw), correction="cr9")


def test_summarize_table():
    ds, result = random_fit(seed=8)
    table = summarize(result, cov_iid(result), level=0.95)
    assert list(table.columns) == ["estimate", "std_error", "t_stat", "p_value", "ci_low", "ci_high"]
    assert list(table.index) == ["intercept", "treat[treatment]"]
    np.testing.assert_allclose(table["estimate"].to_numpy(), result.beta, rtol=1e-15)
    assert ((table["ci_low"] <= table["estimate"]) & (table["estimate"] <= table["ci_high"])).all()
    wider = summarize(result, cov_iid(result), level=0.99)
    assert (wider["ci_high"] - wider["ci_low"] > table["ci_high"] - table["ci_low"]).all()
    with pytest.raises(EstimationError):
        summarize(result, cov_iid(result), level=1.5)
