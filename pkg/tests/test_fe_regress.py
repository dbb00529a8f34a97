import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm

from exceptions import ConvergenceError, DomainError, EstimationError, RankDeficiencyError
from fe_regress import (
    RegressionSpec,
    check_full_rank,
    cluster_vcov,
    delta_from_betas,
    estimate_delta,
    lincom,
    ols_fe,
    parse_lincom,
    placebo_lags,
    poisson_fe,
    poisson_pml,
    within_transform,
)
from panel_synth import SynthConfig, simulate_reduced_form_panel, with_derived_columns

CONTROLS = ("ln_population", "ln_emp_nonlegal")


def baseline_spec(**overrides):
    values = dict(outcome="ln_emp_legal", treatments=("n_br", "n_fs"), controls=CONTROLS,
                  absorb=("county", "district_year"))
    values.update(overrides)
    return RegressionSpec(**values)


def test_within_estimates_match_explicit_dummies(reduced_form_panel):
    result = ols_fe(reduced_form_panel, baseline_spec())
    frame = with_derived_columns(reduced_form_panel)
    dummies = pd.concat([
        pd.get_dummies(frame["county"], prefix="c", dtype=float),
        pd.get_dummies(frame["district_year"], prefix="dy", drop_first=True, dtype=float),
    ], axis=1)
    x = np.column_stack([frame[["n_br", "n_fs", *CONTROLS]].to_numpy(dtype=float), dummies.to_numpy()])
    beta, *_ = np.linalg.lstsq(x, frame["ln_emp_legal"].to_numpy(), rcond=None)
    assert result.params == pytest.approx(beta[:4], abs=1e-7)


def test_cluster_vcov_matches_statsmodels():
    rng = np.random.default_rng(0)
    groups = np.repeat(np.arange(30), 6)
    x = sm.add_constant(rng.normal(size=(len(groups), 2)))
    y = x @ np.array([1.0, 0.5, -0.3]) + rng.normal(size=len(groups)) + np.repeat(rng.normal(size=30), 6)
    fit = sm.OLS(y, x).fit(cov_type="cluster", cov_kwds={"groups": groups})
    ours = cluster_vcov(fit.resid, x, groups)
    np.testing.assert_allclose(ours, np.asarray(fit.cov_params()), rtol=1e-10, atol=1e-14)


def test_cluster_vcov_needs_two_clusters():
    with pytest.raises(EstimationError):
        cluster_vcov(np.ones(5), np.ones((5, 1)), [1] * 5)


def test_reduced_form_recovers_treatment_effects(reduced_form_panel):
    result = ols_fe(reduced_form_panel, baseline_spec())
    se = result.std_errors
    assert abs(result.coefficients["n_br"] - 0.01) < 5 * se["n_br"]
    assert abs(result.coefficients["n_fs"] + 0.011) < 5 * se["n_fs"]
    assert result.n_clusters == 50
    assert 0.0 <= result.within_r2 <= 1.0
    table = result.to_frame()
    assert list(table.columns) == ["term", "estimate", "std_err", "z", "p_value"]
    assert table["term"].tolist() == ["n_br", "n_fs", *CONTROLS]


def test_few_clusters_are_noted(reduced_form_panel):
    result = ols_fe(reduced_form_panel, baseline_spec())
    assert not any("clusters (< 40)" in note for note in result.dof_notes)
    small = reduced_form_panel[reduced_form_panel["county_id"] <= 20]
    result = ols_fe(small, baseline_spec())
    assert any("clusters (< 40)" in note for note in result.dof_notes)


def test_within_transform_removes_group_means(reduced_form_panel):
    frame = with_derived_columns(reduced_form_panel)
    demeaned = within_transform(frame, ["ln_emp_legal", "n_br"], ["county", "district_year"])
    for dim in ("county", "district_year"):
        means = demeaned.groupby(frame[dim]).mean().abs().to_numpy()
        assert means.max() < 1e-8


def test_within_transform_reports_non_convergence(reduced_form_panel):
    frame = with_derived_columns(reduced_form_panel)
    with pytest.raises(ConvergenceError) as info:
        within_transform(frame, ["ln_emp_legal"], ["county", "district_year"], max_iter=1)
    assert len(info.value.trace) == 1
    assert info.value.last_change > 0


def test_regressor_without_within_variation_is_named(reduced_form_panel):
    frame = with_derived_columns(reduced_form_panel)
    frame["county_size"] = frame["county_id"] * 3.0
    with pytest.raises(RankDeficiencyError) as info:
        ols_fe(frame, baseline_spec(controls=(*CONTROLS, "county_size")))
    assert "county_size" in info.value.columns


def test_check_full_rank_names_collinear_column():
    x = np.column_stack([np.arange(10.0), np.ones(10), 2 * np.arange(10.0)])
    with pytest.raises(RankDeficiencyError) as info:
        check_full_rank(x, ["a", "b", "c"])
    assert len(info.value.columns) == 1
    check_full_rank(x[:, :2], ["a", "b"])


def test_spec_validation():
    with pytest.raises(DomainError):
        baseline_spec(controls=("n_br",))
    with pytest.raises(DomainError):
        baseline_spec(lags=(-1,))
    with pytest.raises(DomainError):
        baseline_spec(absorb=("county", "decade"))


def test_missing_column_is_a_domain_error(reduced_form_panel):
    with pytest.raises(DomainError):
        ols_fe(reduced_form_panel, baseline_spec(controls=("ln_income",)))


@pytest.mark.parametrize("expression, expected", [
    ("n_br + n_fs", {"n_br": 1.0, "n_fs": 1.0}),
    ("1.703*n_br + 0.470*n_fs", {"n_br": 1.703, "n_fs": 0.47}),
    ("n_br - n_fs", {"n_br": 1.0, "n_fs": -1.0}),
    ("2e-1*n_br", {"n_br": 0.2}),
])
def test_parse_lincom(expression, expected):
    assert parse_lincom(expression) == pytest.approx(expected)


@pytest.mark.parametrize("expression", ["", "2*", "n_br ** 2"])
def test_parse_lincom_rejects_malformed(expression):
    with pytest.raises(DomainError):
        parse_lincom(expression)


def test_lincom_uses_full_covariance(reduced_form_panel):
    result = ols_fe(reduced_form_panel, baseline_spec(lincoms=("n_br + n_fs",)))
    v = result.vcov_clustered
    test = result.lincom_tests[0]
    assert test.estimate == pytest.approx(result.coefficients["n_br"] + result.coefficients["n_fs"])
    assert test.std_err == pytest.approx(np.sqrt(v[0, 0] + v[1, 1] + 2 * v[0, 1]))
    assert 0.0 <= test.p_value <= 1.0
    with pytest.raises(DomainError):
        lincom(result, {"n_local": 1.0})


def test_placebo_lags_bankruptcy_count_only(reduced_form_panel):
    result = placebo_lags(reduced_form_panel, baseline_spec(lags=(1,)))
    assert result.names == ["n_br", "n_fs", "n_br_lag1", *CONTROLS]
    assert result.n_obs == 50 * 4
    with pytest.raises(DomainError):
        placebo_lags(reduced_form_panel, baseline_spec(lags=(5,)))


def test_placebo_lags_of_chosen_columns(reduced_form_panel):
    result = placebo_lags(reduced_form_panel, baseline_spec(lags=(1, 2)), lagged=("n_br", "n_fs"))
    assert result.names[:6] == ["n_br", "n_fs", "n_br_lag1", "n_fs_lag1", "n_br_lag2", "n_fs_lag2"]
    assert result.n_obs == 50 * 3
    with pytest.raises(DomainError, match="ln_income"):
        placebo_lags(reduced_form_panel, baseline_spec(lags=(1,)), lagged=("ln_income",))


def test_placebo_lag_zero_reproduces_baseline(reduced_form_panel):
    baseline = ols_fe(reduced_form_panel, baseline_spec())
    placebo = placebo_lags(reduced_form_panel, baseline_spec(lags=(0,)))
    assert placebo.params == pytest.approx(baseline.params, abs=1e-12)


def test_poisson_intercept_only_is_log_mean():
    y = np.array([1.0, 2.0, 3.0, 4.0, 0.0, 2.0])
    fit = poisson_pml(y, np.ones((6, 1)), [1, 1, 2, 2, 3, 3], ["const"])
    assert np.asarray(fit.params)[0] == pytest.approx(np.log(2.0), abs=1e-7)


def test_poisson_rejects_degenerate_outcomes():
    with pytest.raises(EstimationError):
        poisson_pml(np.zeros(4), np.ones((4, 1)), [1, 1, 2, 2], ["const"])
    with pytest.raises(DomainError):
        poisson_pml(np.array([1.0, -1.0]), np.ones((2, 1)), [1, 2], ["const"])


def test_poisson_fe_recovers_slope():
    rng = np.random.default_rng(3)
    county = np.repeat(np.arange(1, 101), 8)
    x = rng.normal(size=len(county))
    effect = np.repeat(rng.normal(1.5, 0.3, size=100), 8)
    frame = pd.DataFrame({"county": county, "x": x, "y": rng.poisson(np.exp(0.5 * x + effect)).astype(float)})
    spec = RegressionSpec(outcome="y", treatments=("x",), absorb=("county",))
    result = poisson_fe(frame, spec)
    assert result.coefficients["x"] == pytest.approx(0.5, abs=0.05)
    assert result.std_errors["x"] > 0
    assert result.estimator == "poisson_fe"


def test_poisson_fe_detects_separation(reduced_form_panel):
    panel = reduced_form_panel.copy()
    panel.loc[panel["county_id"] == 1, "n_fs"] = 0
    spec = RegressionSpec(outcome="n_fs", treatments=("ln_population",), absorb=("county",))
    with pytest.raises(ConvergenceError, match="separation"):
        poisson_fe(panel, spec)


@pytest.mark.parametrize("beta_u, beta_u_w, expected, tol", [
    (0.0413, 0.0384, 24.983, 0.05),
    (0.0121, 0.0295, 33.445, 0.05),
    (0.5, 0.5, 1.0, 1e-12),
])
def test_delta_from_betas(beta_u, beta_u_w, expected, tol):
    assert delta_from_betas(beta_u, beta_u_w) == pytest.approx(expected, abs=tol)


def test_delta_from_betas_rejects_zero():
    with pytest.raises(DomainError):
        delta_from_betas(0.0, 0.1)


def test_estimate_delta_runs_on_structural_panel(structural_panel):
    estimate = estimate_delta(structural_panel)
    assert np.isfinite(estimate.delta)
    assert estimate.delta == pytest.approx(delta_from_betas(estimate.beta_u, estimate.beta_u_w))
    assert "implied delta" in estimate.summary()


def test_zero_noise_reduced_form_recovers_truths_exactly():
    cfg = SynthConfig(n_counties=30, n_years=5, n_districts=6, n_states=3, dgp_kind="reduced_form",
                      br_rate=2.0, noise_sd_logemp=0.0, rng_seed=21)
    result = ols_fe(simulate_reduced_form_panel(cfg), baseline_spec())
    assert result.coefficients["n_br"] == pytest.approx(0.01, abs=1e-8)
    assert result.coefficients["n_fs"] == pytest.approx(-0.011, abs=1e-8)
    assert result.coefficients["ln_population"] == pytest.approx(0.3, abs=1e-8)


def _random_fe_instance(seed):
    rng = np.random.default_rng(seed)
    n_counties = int(rng.integers(15, 61))
    n_districts = int(rng.integers(3, 9))
    county = np.repeat(np.arange(1, n_counties + 1), 6)
    year = np.tile(np.arange(2000, 2006), n_counties)
    district = (county - 1) % n_districts + 1
    x = rng.normal(size=(len(county), 3))
    y = (x @ np.array([0.4, -0.2, 0.1]) + np.repeat(rng.normal(size=n_counties), 6)
         + rng.normal(scale=0.3, size=len(county)))
    frame = pd.DataFrame({"county": county, "county_id": county, "year": year,
                          "district_year": district * 10_000 + year,
                          "x1": x[:, 0], "x2": x[:, 1], "x3": x[:, 2], "y": y})
    keep = rng.random(len(frame)) > 0.1
    return frame[keep].reset_index(drop=True)


FE_SPEC = RegressionSpec(outcome="y", treatments=("x1", "x2"), controls=("x3",), absorb=("county", "district_year"))


@pytest.mark.parametrize("seed", range(25))
def test_within_estimator_matches_dummy_regression_and_sandwich(seed):
    frame = _random_fe_instance(seed)
    result = ols_fe(frame, FE_SPEC)

    dummies = pd.concat([pd.get_dummies(frame["county"], prefix="c", dtype=float),
                         pd.get_dummies(frame["district_year"], prefix="dy", dtype=float)], axis=1).to_numpy()
    x = frame[["x1", "x2", "x3"]].to_numpy()
    y = frame["y"].to_numpy()
    beta, *_ = np.linalg.lstsq(np.column_stack([x, dummies]), y, rcond=None)
    np.testing.assert_allclose(result.params, beta[:3], rtol=0, atol=1e-8)

    residuals = y - np.column_stack([x, dummies]) @ beta
    x_tilde = x - dummies @ np.linalg.lstsq(dummies, x, rcond=None)[0]
    bread = np.linalg.inv(x_tilde.T @ x_tilde)
    meat = np.zeros((3, 3))
    for county in np.unique(frame["county"]):
        rows = (frame["county"] == county).to_numpy()
        score = x_tilde[rows].T @ residuals[rows]
        meat += np.outer(score, score)
    n, g = len(frame), frame["county"].nunique()
    sandwich = g / (g - 1) * (n - 1) / (n - 3) * bread @ meat @ bread
    np.testing.assert_allclose(result.vcov_clustered, sandwich, rtol=0, atol=1e-10)


def test_county_level_shift_leaves_coefficients_unchanged(reduced_form_panel):
    baseline = ols_fe(reduced_form_panel, baseline_spec())
    shifted = reduced_form_panel.copy()
    shifted.loc[shifted["county_id"] == 7, "emp_legal"] *= np.exp(5.0)
    moved = ols_fe(shifted, baseline_spec())
    np.testing.assert_allclose(moved.params, baseline.params, rtol=0, atol=1e-10)
