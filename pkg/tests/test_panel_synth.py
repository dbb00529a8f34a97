import time

import numpy as np
import pandas as pd
import pytest

from exceptions import DomainError, PanelFormatError
from model_core import delta_theta, solve_log_diff_system, skill_share
from panel_synth import (
    COLUMNS,
    SynthConfig,
    county_geography,
    read_panel,
    simulate_panel,
    simulate_reduced_form_panel,
    simulate_shocks,
    simulate_structural_panel,
    validate_panel,
    with_derived_columns,
    write_panel,
)


def test_shocks_respect_forum_shopping_bound():
    shocks = simulate_shocks(SynthConfig(n_counties=40, n_years=8, br_rate=3.0, rng_seed=1))
    assert len(shocks) == 40 * 8
    assert (shocks["n_fs"] <= shocks["n_br"]).all()
    assert (shocks["n_fs"] >= 0).all()


def test_forum_shopping_share_near_probability():
    shocks = simulate_shocks(SynthConfig(n_counties=400, n_years=10, n_districts=20, br_rate=4.0, rng_seed=2))
    share = shocks["n_fs"].sum() / shocks["n_br"].sum()
    assert share == pytest.approx(0.276, abs=0.02)


def test_zero_bankruptcy_rate_gives_no_shocks():
    shocks = simulate_shocks(SynthConfig(n_counties=25, n_years=5, br_rate=0.0, rng_seed=3))
    assert (shocks[["n_br", "n_fs"]] == 0).all().all()


def test_certain_forum_shopping_moves_every_case():
    shocks = simulate_shocks(SynthConfig(n_counties=25, n_years=5, br_rate=3.0, fs_prob=1.0, rng_seed=3))
    assert (shocks["n_fs"] == shocks["n_br"]).all()
    assert shocks["n_br"].sum() > 0


def test_bankruptcy_count_mean_matches_rate():
    cfg = SynthConfig(n_counties=1000, n_years=100, n_districts=20, br_rate=1.7, br_heterogeneity_sd=0.0, rng_seed=6)
    counts = simulate_shocks(cfg)["n_br"].to_numpy(dtype=float)
    assert len(counts) == 100_000
    standard_error = np.sqrt(cfg.br_rate / len(counts))
    assert abs(counts.mean() - cfg.br_rate) < 3 * standard_error


def test_geography_nests_counties_in_districts_in_states():
    geo = county_geography(SynthConfig(n_counties=30, n_districts=6, n_states=3))
    assert geo.groupby("county_id")["district_id"].nunique().max() == 1
    assert geo.groupby("district_id")["state_id"].nunique().max() == 1
    with pytest.raises(DomainError):
        SynthConfig(n_districts=2, n_states=3)


def test_same_seed_same_panel(gmm_params, demand):
    cfg = SynthConfig(n_counties=20, n_years=4, rng_seed=99)
    first = simulate_structural_panel(cfg, gmm_params, demand)
    second = simulate_structural_panel(cfg, gmm_params, demand)
    pd.testing.assert_frame_equal(first, second)


def test_county_draws_do_not_depend_on_panel_size(gmm_params, demand):
    small = simulate_structural_panel(SynthConfig(n_counties=10, rng_seed=4), gmm_params, demand)
    large = simulate_structural_panel(SynthConfig(n_counties=25, rng_seed=4), gmm_params, demand)
    pd.testing.assert_frame_equal(small, large[large["county_id"] <= 10].reset_index(drop=True))


def test_noiseless_structural_panel_follows_log_difference_system(noiseless_panel, gmm_params, demand):
    pi_share = skill_share(0.42, 0.58, gmm_params)
    county = noiseless_panel[noiseless_panel["county_id"] == 1].sort_values("year")
    local = (county["n_br"] - county["n_fs"]).to_numpy(dtype=float)
    shift = delta_theta(demand, local[1:], local[:-1])
    dw_s, dw_u, dn_s, dn_u = solve_log_diff_system(shift, pi_share, gmm_params)
    assert np.diff(np.log(county["wage_skilled"].to_numpy())) == pytest.approx(dw_s, abs=1e-12)
    assert np.diff(np.log(county["wage_unskilled"].to_numpy())) == pytest.approx(dw_u, abs=1e-12)
    assert np.diff(np.log(county["emp_skilled"].to_numpy())) == pytest.approx(dn_s, abs=1e-12)
    assert np.diff(np.log(county["emp_unskilled"].to_numpy())) == pytest.approx(dn_u, abs=1e-12)


def test_structural_panel_anchors(noiseless_panel, gmm_params):
    first_year = noiseless_panel[noiseless_panel["year"] == noiseless_panel["year"].min()]
    share = first_year["emp_skilled"] / first_year["emp_legal"]
    assert share.to_numpy() == pytest.approx(0.42)
    premium = first_year["wage_skilled"] / first_year["wage_unskilled"]
    assert premium.to_numpy() == pytest.approx(gmm_params.a_rel)


def test_reduced_form_panel_shape(reduced_form_panel):
    assert list(reduced_form_panel.columns) == COLUMNS
    assert len(reduced_form_panel) == 50 * 5
    validate_panel(reduced_form_panel)


def test_dispatch_and_kind_mismatch(gmm_params, demand):
    cfg = SynthConfig(n_counties=5, n_years=3, n_districts=5, n_states=1, dgp_kind="reduced_form")
    assert len(simulate_panel(cfg, gmm_params, demand)) == 15
    with pytest.raises(DomainError):
        simulate_structural_panel(cfg, gmm_params, demand)
    with pytest.raises(DomainError):
        simulate_reduced_form_panel(cfg.model_copy(update={"dgp_kind": "structural"}))


def test_missing_mask_drops_rows(gmm_params, demand):
    cfg = SynthConfig(n_counties=40, n_years=6, missing_rate=0.3, rng_seed=8)
    panel = simulate_structural_panel(cfg, gmm_params, demand)
    assert 0 < len(panel) < 240
    validate_panel(panel)


def test_file_round_trip(tmp_path, reduced_form_panel):
    path = write_panel(reduced_form_panel, tmp_path / "panel.csv")
    back = read_panel(path)
    expected = validate_panel(reduced_form_panel)
    pd.testing.assert_frame_equal(back[COLUMNS[:6]], expected[COLUMNS[:6]])
    np.testing.assert_allclose(back[COLUMNS[6:]].to_numpy(), expected[COLUMNS[6:]].to_numpy(), rtol=1e-12)


def _small_frame():
    return pd.DataFrame([
        [1, 1, 1, 2000, 2, 1, 10.0, 5.0, 100.0, 1.0, 4.0, 6.0, 2.0, 1.0],
        [1, 1, 1, 2001, 3, 0, 11.0, 5.0, 100.0, 1.0, 4.0, 7.0, 2.0, 1.0],
    ], columns=COLUMNS)


def test_validation_rejects_forum_shopping_above_bankruptcies():
    frame = _small_frame()
    frame.loc[1, "n_fs"] = 5
    with pytest.raises(PanelFormatError) as info:
        validate_panel(frame, line_offset=2)
    assert info.value.row == 3


@pytest.mark.parametrize("column, value", [("emp_legal", 0.0), ("wage_avg", -1.0), ("population", np.inf)])
def test_validation_rejects_nonpositive_values(column, value):
    frame = _small_frame()
    frame.loc[0, column] = value
    with pytest.raises(PanelFormatError):
        validate_panel(frame)


def test_validation_rejects_duplicates_and_split_geography():
    frame = _small_frame()
    frame.loc[1, "year"] = 2000
    with pytest.raises(PanelFormatError, match="duplicate"):
        validate_panel(frame)
    frame = _small_frame()
    frame.loc[1, "district_id"] = 2
    with pytest.raises(PanelFormatError, match="more than one"):
        validate_panel(frame)


def test_read_panel_cites_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    rows = [",".join(COLUMNS),
            "1,1,1,2000,2,1,10,5,100,1,4,6,2,1",
            "1,1,1,2001,2,1,abc,5,100,1,4,6,2,1"]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    with pytest.raises(PanelFormatError) as info:
        read_panel(path)
    assert info.value.row == 3
    assert "row 3" in str(info.value)


def test_read_panel_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("county_id,year\n1,2000\n", encoding="utf-8")
    with pytest.raises(PanelFormatError) as info:
        read_panel(path)
    assert info.value.row == 1


def test_derived_columns():
    frame = with_derived_columns(validate_panel(_small_frame()))
    assert frame["n_local"].tolist() == [1, 3]
    assert frame["ln_n_br"].to_numpy() == pytest.approx(np.log([2.0, 3.0]))
    assert frame["district_year"].tolist() == [10_000 + 2000, 10_000 + 2001]
    assert frame["ln_emp_legal"].iloc[0] == pytest.approx(np.log(10.0))


def test_read_panel_handles_full_sample_size_quickly(tmp_path):
    panel = simulate_reduced_form_panel(SynthConfig(n_counties=3075, n_years=6, n_districts=90, n_states=45,
                                                    dgp_kind="reduced_form", rng_seed=12))
    path = write_panel(panel, tmp_path / "panel.csv")
    start = time.perf_counter()
    back = read_panel(path)
    elapsed = time.perf_counter() - start
    assert len(back) == 18_450
    assert elapsed < 1.0
