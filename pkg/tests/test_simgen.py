import numpy as np
import pytest

from rowfold import (
    DataError,
    EstimationError,
    compress,
    compression_ratio,
    coverage_study,
    gen_ab,
    gen_panel,
    true_qte,
    zero_inflated_quantile,
)


# ---------------------------------------------------------------------------
# gen_ab


def test_gen_ab_deterministic_per_seed():
    a = gen_ab(n=500, effect=0.5, seed=3)
    b = gen_ab(n=500, effect=0.5, seed=3)
    np.testing.assert_array_equal(a.outcome, b.outcome)
    np.testing.assert_array_equal(a.arm, b.arm)
    c = gen_ab(n=500, effect=0.5, seed=4)
    assert not np.array_equal(a.outcome, c.outcome)


def test_gen_ab_split_is_even():
    ds = gen_ab(n=501, effect=0.0, seed=0)
    assert (ds.arm == 1).sum() == 250  # odd row goes to control
    assert ds.arm_labels == ("control", "treatment")


def test_gen_ab_truth_record():
    ds = gen_ab(n=200, effect=1.5, seed=9, noise="homoskedastic", baseline=3.0, sigma=0.5)
    assert ds.truth["effect"] == 1.5
    assert ds.truth["mean_effect"] == 1.5
    assert ds.truth["noise"] == "homoskedastic"
    assert ds.truth["baseline"] == 3.0


def test_gen_ab_homoskedastic_recovers_effect():
    ds = gen_ab(n=60_000, effect=2.0, seed=5, sigma=1.0)
    diff = ds.outcome[ds.arm == 1].mean() - ds.outcome[ds.arm == 0].mean()
    assert diff == pytest.approx(2.0, abs=0.03)


def test_gen_ab_heteroskedastic_weights():
    ds = gen_ab(n=5000, effect=0.0, seed=8, noise="heteroskedastic",
                weight_spread=1.0, variance_power=2.0)
    assert (ds.weight > 0).all()
    assert ds.weight.std() > 0.5  # genuinely spread out
    assert ds.truth["variance_power"] == 2.0
    # noise scales with w^-1: low-weight rows are wilder
    lo = ds.outcome[ds.weight < np.median(ds.weight)]
    hi = ds.outcome[ds.weight >= np.median(ds.weight)]
    assert lo.std() > 2 * hi.std()


def test_gen_ab_zero_inflated_rate():
    ds = gen_ab(n=20_000, effect=1.0, seed=2, noise="zero_inflated", zero_rate=0.6)
    assert (ds.outcome == 0).mean() == pytest.approx(0.6, abs=0.02)
    assert (ds.outcome >= 0).all()
    assert ds.truth["scale_treated"] == ds.truth["baseline"] + 1.0


def test_gen_ab_cardinality_controls_folding():
    fine = gen_ab(n=20_000, effect=0.1, seed=6)
    coarse = gen_ab(n=20_000, effect=0.1, seed=6, cardinality=50)
    assert compression_ratio(compress(fine)) < 1.01
    folded = compress(coarse)
    assert folded.n_unique <= 2 * 50
    assert compression_ratio(folded) > 100


def test_gen_ab_validation():
    with pytest.raises(EstimationError):
        gen_ab(n=100, effect=0.0, seed=0, noise="cauchy")
    with pytest.raises(DataError):
        gen_ab(n=2, effect=0.0, seed=0)
    with pytest.raises(EstimationError):
        gen_ab(n=100, effect=-20.0, seed=0, noise="zero_inflated", baseline=5.0)


# ---------------------------------------------------------------------------
# ground-truth helpers


def test_zero_inflated_quantile_closed_form():
    assert zero_inflated_quantile(2.0, 0.6, 0.5) == 0.0
    # tau 0.8 with 60% zeros: conditional level (0.8-0.6)/0.4 = 0.5 of
    # an exponential(2) -> 2 ln 2
    assert zero_inflated_quantile(2.0, 0.6, 0.8) == pytest.approx(2 * np.log(2), rel=1e-12)


def test_true_qte_consistent_with_empirical():
    ds = gen_ab(n=400_000, effect=2.0, seed=12, noise="zero_inflated", baseline=5.0)
    truth = true_qte(ds.truth, 0.9)
    emp = np.quantile(ds.outcome[ds.arm == 1], 0.9) - np.quantile(ds.outcome[ds.arm == 0], 0.9)
    assert emp == pytest.approx(truth, abs=0.15)
    # location-shift regime: every quantile moves by the effect
    assert true_qte(gen_ab(n=100, effect=0.7, seed=1).truth, 0.3) == 0.7


# ---------------------------------------------------------------------------
# gen_panel


def test_gen_panel_shape_and_balance():
    ds = gen_panel(n_accounts=50, n_periods=4, effect=1.0, seed=3)
    assert ds.n_rows == 200
    assert len(np.unique(ds.cluster)) == 50
    assert sorted(np.unique(ds.period)) == [0, 1, 2, 3]
    # treatment is constant within account
    for acct in range(50):
        assert len(np.unique(ds.arm[ds.cluster == acct])) == 1


@pytest.mark.parametrize(
    "path,expected",
    [
        ("flat", [2.0, 2.0, 2.0]),
        ("linear", [0.0, 1.0, 2.0]),
        ("diminishing", [2.0, 1.0, 0.5]),
    ],
)
def test_gen_panel_effect_paths(path, expected):
    ds = gen_panel(n_accounts=10, n_periods=3, effect=2.0, seed=1, effect_path=path)
    assert list(ds.truth["daily_effects"]) == pytest.approx(expected)


def test_gen_panel_ar1_serial_correlation():
    ds = gen_panel(n_accounts=4000, n_periods=2, effect=0.0, seed=7, rho=0.7, error="ar1")
    wide = ds.outcome.reshape(4000, 2)
    r = np.corrcoef(wide[:, 0], wide[:, 1])[0, 1]
    assert r == pytest.approx(0.7, abs=0.05)


def test_gen_panel_equicorrelated_errors():
    ds = gen_panel(n_accounts=4000, n_periods=3, effect=0.0, seed=8,
                   rho=0.5, error="equicorrelated")
    wide = ds.outcome.reshape(4000, 3)
    r01 = np.corrcoef(wide[:, 0], wide[:, 1])[0, 1]
    r02 = np.corrcoef(wide[:, 0], wide[:, 2])[0, 1]
    assert r01 == pytest.approx(0.5, abs=0.05)
    assert r02 == pytest.approx(0.5, abs=0.05)  # same at every lag


def test_gen_panel_validation():
    with pytest.raises(EstimationError):
        gen_panel(n_accounts=10, n_periods=3, effect=0.0, seed=0, error="ma")
    with pytest.raises(EstimationError):
        gen_panel(n_accounts=10, n_periods=3, effect=0.0, seed=0, rho=1.0)
    with pytest.raises(DataError):
        gen_panel(n_accounts=2, n_periods=3, effect=0.0, seed=0)


# ---------------------------------------------------------------------------
# coverage studies


def test_coverage_study_well_specified_smoke():
    rows = coverage_study("ab", ("iid", "hc1"), n_reps=200, seed=50, n=400, effect=0.3)
    for row in rows.values():
        assert 0.90 <= row.coverage <= 0.99
        assert row.mean_width > 0
        assert row.n_reps == 200


def test_coverage_study_detects_cluster_miscalibration():
    rows = coverage_study(
        "panel", ("iid", "cr1"), n_reps=200, seed=60,
        n_accounts=100, n_periods=5, effect=1.0, rho=0.7,
    )
    assert rows["iid"].coverage < rows["cr1"].coverage
    assert rows["iid"].mean_width < rows["cr1"].mean_width


def test_coverage_study_is_deterministic():
    a = coverage_study("ab", ("iid",), n_reps=50, seed=9, n=300, effect=0.2)
    b = coverage_study("ab", ("iid",), n_reps=50, seed=9, n=300, effect=0.2)
    assert a["iid"].coverage == b["iid"].coverage
    assert a["iid"].mean_width == b["iid"].mean_width


def test_coverage_study_validation():
    with pytest.raises(EstimationError):
        coverage_study("cohort", ("iid",), n_reps=10, seed=0)
    with pytest.raises(EstimationError):
        coverage_study("ab", ("cr1",), n_reps=2, seed=0, n=100, effect=0.0)
