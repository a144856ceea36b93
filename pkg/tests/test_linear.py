import numpy as np
import pytest
import statsmodels.api as sm

from rowfold import (
    DataError,
    Dataset,
    EstimationError,
    ModelSpec,
    RankDeficiencyError,
    build_design,
    compress,
    fit,
    fit_call_count,
    predict,
    treatment_effect,
    uncompressed,
)


def two_arm(outcome, arm, weight=None, x=None):
    n = len(outcome)
    return Dataset(
        outcome=np.asarray(outcome, dtype=float),
        features=np.empty((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1),
        weight=np.ones(n) if weight is None else np.asarray(weight, dtype=float),
        cluster=np.arange(n),
        period=np.zeros(n),
        arm=np.asarray(arm),
        feature_names=() if x is None else ("x",),
        arm_labels=("control", "treatment"),
    )


def test_two_group_means_recovered_exactly():
    # control mean 2, treated mean 4 -> intercept 2, effect 2
    ds = two_arm([1.0, 3.0, 3.0, 5.0], [0, 0, 1, 1])
    result = fit(build_design(compress(ds), ModelSpec(weight_source="none")))
    assert result.coef("intercept") == pytest.approx(2.0, abs=1e-14)
    assert result.coef("treat[treatment]") == pytest.approx(2.0, abs=1e-14)
    assert treatment_effect(result) == pytest.approx(2.0, abs=1e-14)


def test_weighted_mean_intercept_only():
    # weighted mean of (1,2,3,4) with weights (1,1,1,5) = (1+2+3+20)/8 = 3.25
    ds = two_arm([1.0, 2.0, 3.0, 4.0], [0, 0, 0, 1], weight=[1.0, 1.0, 1.0, 5.0])
    spec = ModelSpec(treatment=False, weight_source="column")
    result = fit(build_design(compress(ds), spec))
    assert result.beta.tolist() == [pytest.approx(3.25, abs=1e-14)]


def test_matches_lstsq_oracle_on_raw_rows():
    rng = np.random.default_rng(42)
    n = 500
    x = rng.normal(size=(n, 2))
    arm = rng.integers(0, 2, n)
    arm[:2] = [0, 1]
    w = rng.uniform(0.2, 3.0, n)
    y = 1.0 + 0.5 * arm + x @ [0.3, -0.7] + rng.normal(size=n)
    ds = Dataset(
        outcome=y, features=x, weight=w, cluster=np.arange(n), period=np.zeros(n),
        arm=arm, feature_names=("a", "b"), arm_labels=("control", "treatment"),
    )
    design = build_design(uncompressed(ds), ModelSpec(features=("a", "b")))
    result = fit(design)
    # independent route: scaled least squares on the raw matrix
    root_w = np.sqrt(w)
    beta_ref, *_ = np.linalg.lstsq(design.matrix * root_w[:, None], y * root_w, rcond=None)
    np.testing.assert_allclose(result.beta, beta_ref, rtol=1e-10, atol=1e-12)


def test_matches_wls_oracle():
    rng = np.random.default_rng(7)
    n = 300
    x = np.round(rng.normal(size=n), 1)
    arm = rng.integers(0, 2, n)
    arm[:2] = [0, 1]
    w = rng.uniform(0.5, 2.0, n)
    y = 2.0 + arm + 0.4 * x + rng.normal(size=n) / np.sqrt(w)
    ds = two_arm(y, arm, weight=w, x=x)
    design = build_design(compress(ds), ModelSpec(features=("x",)))
    result = fit(design)
    sm_fit = sm.WLS(y, sm.add_constant(np.column_stack([arm, x])), weights=w).fit()
    np.testing.assert_allclose(result.beta, sm_fit.params, rtol=1e-10)
    assert result.weighted_rss == pytest.approx(sm_fit.ssr, rel=1e-10)


def test_folded_and_raw_fits_agree():
    rng = np.random.default_rng(3)
    n = 2000
    y = rng.integers(0, 8, n).astype(float)
    arm = rng.integers(0, 2, n)
    arm[:2] = [0, 1]
    w = rng.uniform(0.5, 2.0, n)  # weights differ inside fold groups
    ds = two_arm(y, arm, weight=w)
    spec = ModelSpec()
    folded = fit(build_design(compress(ds), spec))
    raw = fit(build_design(uncompressed(ds), spec))
    np.testing.assert_allclose(folded.beta, raw.beta, rtol=1e-12)
    assert folded.weighted_rss == pytest.approx(raw.weighted_rss, rel=1e-12)
    assert folded.dof == raw.dof == n - 2


def test_interactions_give_arm_specific_slopes():
    rng = np.random.default_rng(11)
    n = 1000
    x = rng.normal(size=n)
    arm = rng.integers(0, 2, n)
    arm[:2] = [0, 1]
    y = 1.0 + 2.0 * arm + 0.5 * x + 1.5 * arm * x
    ds = two_arm(y, arm, x=x)
    spec = ModelSpec(features=("x",), interact_treatment=("x",), weight_source="none")
    result = fit(build_design(uncompressed(ds), spec))
    assert result.column_names == ("intercept", "treat[treatment]", "x", "treat[treatment]:x")
    np.testing.assert_allclose(result.beta, [1.0, 2.0, 0.5, 1.5], atol=1e-10)


def test_rank_deficiency_names_offending_column():
    ds = two_arm([1.0, 2.0, 3.0, 4.0], [0, 0, 1, 1], x=[1.0, 1.0, 1.0, 1.0])
    # "x" is all ones: collinear with the intercept
    with pytest.raises(RankDeficiencyError) as err:
        fit(build_design(uncompressed(ds), ModelSpec(features=("x",))))
    assert "x" in err.value.columns or "intercept" in err.value.columns


def test_too_few_rows_for_dof():
    ds = two_arm([1.0, 2.0], [0, 1])
    with pytest.raises(EstimationError):
        fit(build_design(uncompressed(ds), ModelSpec()))


def test_unknown_feature_rejected():
    ds = two_arm([1.0, 2.0, 3.0], [0, 1, 0])
    with pytest.raises(DataError, match="unknown feature"):
        build_design(compress(ds), ModelSpec(features=("nope",)))


def test_weight_source_none_ignores_analytic_weights():
    ds = two_arm([1.0, 3.0, 3.0, 5.0], [0, 0, 1, 1], weight=[9.0, 1.0, 1.0, 9.0])
    unweighted = fit(build_design(compress(ds), ModelSpec(weight_source="none")))
    assert unweighted.coef("intercept") == pytest.approx(2.0, abs=1e-14)


def test_predict_matches_fitted():
    ds = two_arm([1.0, 3.0, 3.0, 5.0, 2.0], [0, 0, 1, 1, 0])
    design = build_design(uncompressed(ds), ModelSpec(weight_source="none"))
    result = fit(design)
    np.testing.assert_allclose(predict(result, design.matrix), result.fitted, rtol=1e-14)
    with pytest.raises(EstimationError):
        predict(result, np.ones((2, 5)))


def test_fit_counter_increments_once_per_solve():
    ds = two_arm([1.0, 3.0, 3.0, 5.0], [0, 0, 1, 1])
    design = build_design(compress(ds), ModelSpec(weight_source="none"))
    before = fit_call_count()
    result = fit(design)
    assert fit_call_count() == before + 1
    treatment_effect(result)  # extraction must not refit
    result.coef("intercept")
    assert fit_call_count() == before + 1


def test_multi_arm_effects():
    ds = Dataset(
        outcome=np.array([1.0, 1.0, 4.0, 4.0, 6.0, 6.0]),
        features=np.empty((6, 0)),
        weight=np.ones(6),
        cluster=np.arange(6),
        period=np.zeros(6),
        arm=np.array([0, 0, 1, 1, 2, 2]),
        feature_names=(),
        arm_labels=("control", "v1", "v2"),
    )
    result = fit(build_design(compress(ds), ModelSpec(weight_source="none")))
    assert treatment_effect(result, "v1") == pytest.approx(3.0, abs=1e-13)
    assert treatment_effect(result, "v2") == pytest.approx(5.0, abs=1e-13)
    with pytest.raises(EstimationError, match="name one"):
        treatment_effect(result)
