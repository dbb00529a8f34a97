"""
Synthetic County-Year Panels
Bankruptcy and forum-shopping shock processes, model-implied outcomes and
reduced-form outcomes with known treatment effects, plus the panel file format
"""

import logging
from pathlib import Path
from typing import Dict, List, Literal, Union

import numpy as np
import pandas as pd
from pydantic import Field, model_validator

from exceptions import DomainError, PanelFormatError
from model_core import (
    DemandParams,
    FrozenModel,
    ModelParamsGmm,
    delta_theta,
    skill_share,
    solve_log_diff_system,
)

logger = logging.getLogger(__name__)

COLUMNS: List[str] = [
    "county_id", "district_id", "state_id", "year", "n_br", "n_fs",
    "emp_legal", "emp_nonlegal", "population", "wage_avg",
    "emp_skilled", "emp_unskilled", "wage_skilled", "wage_unskilled",
]
INTEGER_COLUMNS = COLUMNS[:6]
POSITIVE_COLUMNS = COLUMNS[6:]
N_REGIONS = 4

# independent draw streams per unit; a unit's draws depend only on (seed, stream, unit id)
STREAM_SHOCKS = 0
STREAM_OUTCOMES = 1
STREAM_DISTRICT = 2
STREAM_MISSING = 3

# nuisance scales of the synthetic geography
COUNTY_SIZE_LOG_MEAN = np.log(200.0)
COUNTY_SIZE_LOG_SD = 0.5
POPULATION_PER_WORKER = 400.0
NONLEGAL_PER_WORKER = 40.0
CONTROL_NOISE_SD = 0.05


class SynthConfig(FrozenModel):
    """Synthetic panel configuration"""

    n_counties: int = Field(60, gt=0)
    n_years: int = Field(6, gt=0)
    n_districts: int = Field(12, gt=0)
    n_states: int = Field(4, gt=0)
    start_year: int = 1991
    br_rate: float = Field(1.7, ge=0)
    br_heterogeneity_sd: float = Field(0.5, ge=0)
    fs_prob: float = Field(0.276, ge=0, le=1)
    noise_sd_logemp: float = Field(0.05, ge=0)
    noise_sd_logwage: float = Field(0.05, ge=0)
    rng_seed: int = Field(20240101, ge=0, lt=2 ** 64)
    dgp_kind: Literal["structural", "reduced_form"] = "structural"
    true_gamma_br: float = 0.01
    true_gamma_fs: float = -0.011
    beta_ln_population: float = 0.3
    beta_ln_emp_nonlegal: float = 0.2
    fe_county_sd: float = Field(1.0, ge=0)
    fe_district_year_sd: float = Field(0.05, ge=0)
    missing_rate: float = Field(0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _geography_nests(self) -> "SynthConfig":
        if self.n_states > self.n_districts:
            raise ValueError("n_states cannot exceed n_districts")
        return self


def county_rng(seed: int, stream: int, unit_id: int) -> np.random.Generator:
    """Generator for one unit of one stream"""
    return np.random.default_rng([seed, stream, unit_id])


def county_geography(cfg: SynthConfig) -> pd.DataFrame:
    """County -> district -> state assignment (round-robin, 1-based ids)"""
    county = np.arange(1, cfg.n_counties + 1)
    district = (county - 1) % cfg.n_districts + 1
    state = (district - 1) % cfg.n_states + 1
    return pd.DataFrame({"county_id": county, "district_id": district, "state_id": state})


def simulate_shocks(cfg: SynthConfig) -> pd.DataFrame:
    """
    Draw bankruptcy counts and their forum-shopped subsets for every county-year

    n_br is Poisson with a county-level lognormal multiplier of mean one on br_rate;
    n_fs is Binomial(n_br, fs_prob).
    """
    geo = county_geography(cfg)
    years = np.arange(cfg.start_year, cfg.start_year + cfg.n_years)
    sd = cfg.br_heterogeneity_sd
    frames = []
    for row in geo.itertuples(index=False):
        rng = county_rng(cfg.rng_seed, STREAM_SHOCKS, row.county_id)
        multiplier = np.exp(rng.normal(-0.5 * sd ** 2, sd)) if sd > 0 else 1.0
        n_br = rng.poisson(cfg.br_rate * multiplier, size=cfg.n_years)
        n_fs = rng.binomial(n_br, cfg.fs_prob)
        frames.append(pd.DataFrame({
            "county_id": row.county_id,
            "district_id": row.district_id,
            "state_id": row.state_id,
            "year": years,
            "n_br": n_br.astype(np.int64),
            "n_fs": n_fs.astype(np.int64),
        }))
    shocks = pd.concat(frames, ignore_index=True)
    logger.debug(f"Simulated shocks: mean n_br={shocks['n_br'].mean():.4f}, mean n_fs={shocks['n_fs'].mean():.4f}")
    return shocks


def _district_year_effects(cfg: SynthConfig) -> Dict[int, np.ndarray]:
    effects = {}
    for district in range(1, cfg.n_districts + 1):
        rng = county_rng(cfg.rng_seed, STREAM_DISTRICT, district)
        effects[district] = rng.normal(0.0, cfg.fe_district_year_sd, size=cfg.n_years)
    return effects


def simulate_structural_panel(cfg: SynthConfig, p: ModelParamsGmm, d: DemandParams,
                              mu_skill_share: float = 0.42) -> pd.DataFrame:
    """
    Panel whose year-over-year log changes follow the four log-difference equations

    Demand shifts come from delta_theta on locally filed bankruptcies (n_br - n_fs);
    independent normal errors enter each equation. Levels are cumulated from the
    period-0 anchors n_s = mu, n_u = 1 - mu, w_u = 1, w_s = A, scaled by county size.
    """
    if cfg.dgp_kind != "structural":
        raise DomainError(f"simulate_structural_panel requires dgp_kind='structural', got {cfg.dgp_kind!r}")
    mu = mu_skill_share
    pi_share = skill_share(mu, 1.0 - mu, p)
    shocks = simulate_shocks(cfg)
    sd = np.array([cfg.noise_sd_logwage, cfg.noise_sd_logwage, cfg.noise_sd_logemp, cfg.noise_sd_logemp])

    frames = []
    for county_id, block in shocks.groupby("county_id", sort=True):
        rng = county_rng(cfg.rng_seed, STREAM_OUTCOMES, int(county_id))
        size = np.exp(rng.normal(COUNTY_SIZE_LOG_MEAN, COUNTY_SIZE_LOG_SD))
        local = (block["n_br"] - block["n_fs"]).to_numpy(dtype=float)

        shift = np.asarray(delta_theta(d, local[1:], local[:-1]), dtype=float)
        errors = rng.normal(0.0, 1.0, size=(len(shift), 4)) * sd
        dw_s, dw_u, dn_s, dn_u = (np.atleast_1d(x) for x in solve_log_diff_system(shift, pi_share, p, errors))

        def cumulate(start: float, changes: np.ndarray) -> np.ndarray:
            return np.exp(start + np.concatenate([[0.0], np.cumsum(changes)]))

        n_s = cumulate(np.log(mu), dn_s)
        n_u = cumulate(np.log(1.0 - mu), dn_u)
        w_s = cumulate(np.log(p.a_rel), dw_s)
        w_u = cumulate(0.0, dw_u)

        emp_skilled = size * n_s
        emp_unskilled = size * n_u
        emp_legal = emp_skilled + emp_unskilled
        control_noise = rng.normal(0.0, 1.0, size=(len(block), 2)) * cfg.noise_sd_logemp

        frame = block.copy()
        frame["emp_legal"] = emp_legal
        frame["emp_nonlegal"] = size * NONLEGAL_PER_WORKER * np.exp(control_noise[:, 0])
        frame["population"] = size * POPULATION_PER_WORKER * np.exp(control_noise[:, 1])
        frame["wage_avg"] = (emp_skilled * w_s + emp_unskilled * w_u) / emp_legal
        frame["emp_skilled"] = emp_skilled
        frame["emp_unskilled"] = emp_unskilled
        frame["wage_skilled"] = w_s
        frame["wage_unskilled"] = w_u
        frames.append(frame)

    panel = apply_missing_mask(pd.concat(frames, ignore_index=True)[COLUMNS], cfg)
    logger.info(f"Structural panel simulated: {len(panel)} rows, {panel['county_id'].nunique()} counties")
    return panel


def simulate_reduced_form_panel(cfg: SynthConfig) -> pd.DataFrame:
    """
    Panel with ln(emp_legal) = gamma_BR n_br + gamma_FS n_fs + controls + county FE
    + district-year FE + noise, the truths being those recorded in cfg
    """
    if cfg.dgp_kind != "reduced_form":
        raise DomainError(f"simulate_reduced_form_panel requires dgp_kind='reduced_form', got {cfg.dgp_kind!r}")
    shocks = simulate_shocks(cfg)
    district_effects = _district_year_effects(cfg)
    trend = np.arange(cfg.n_years, dtype=float)

    frames = []
    for county_id, block in shocks.groupby("county_id", sort=True):
        rng = county_rng(cfg.rng_seed, STREAM_OUTCOMES, int(county_id))
        county_effect = rng.normal(5.0, cfg.fe_county_sd)
        ln_population = rng.normal(10.0, 1.0) + 0.01 * trend + rng.normal(0.0, CONTROL_NOISE_SD, cfg.n_years)
        ln_emp_nonlegal = rng.normal(8.0, 1.0) + rng.normal(0.0, CONTROL_NOISE_SD, cfg.n_years)
        noise = rng.normal(0.0, 1.0, cfg.n_years) * cfg.noise_sd_logemp

        district = int(block["district_id"].iloc[0])
        ln_emp_legal = (
            county_effect
            + district_effects[district]
            + cfg.true_gamma_br * block["n_br"].to_numpy(dtype=float)
            + cfg.true_gamma_fs * block["n_fs"].to_numpy(dtype=float)
            + cfg.beta_ln_population * ln_population
            + cfg.beta_ln_emp_nonlegal * ln_emp_nonlegal
            + noise
        )
        emp_legal = np.exp(ln_emp_legal)
        skilled_share = rng.uniform(0.3, 0.5)
        wage_unskilled = np.exp(rng.normal(3.0, 0.1) + rng.normal(0.0, 1.0, cfg.n_years) * cfg.noise_sd_logwage)
        wage_skilled = 2.4 * wage_unskilled * np.exp(rng.normal(0.0, 1.0, cfg.n_years) * cfg.noise_sd_logwage)

        frame = block.copy()
        frame["emp_legal"] = emp_legal
        frame["emp_nonlegal"] = np.exp(ln_emp_nonlegal)
        frame["population"] = np.exp(ln_population)
        frame["emp_skilled"] = skilled_share * emp_legal
        frame["emp_unskilled"] = (1.0 - skilled_share) * emp_legal
        frame["wage_skilled"] = wage_skilled
        frame["wage_unskilled"] = wage_unskilled
        frame["wage_avg"] = skilled_share * wage_skilled + (1.0 - skilled_share) * wage_unskilled
        frames.append(frame)

    panel = apply_missing_mask(pd.concat(frames, ignore_index=True)[COLUMNS], cfg)
    logger.info(f"Reduced-form panel simulated: {len(panel)} rows, truths "
                f"gamma_BR={cfg.true_gamma_br}, gamma_FS={cfg.true_gamma_fs}")
    return panel


def simulate_panel(cfg: SynthConfig, p: ModelParamsGmm, d: DemandParams,
                   mu_skill_share: float = 0.42) -> pd.DataFrame:
    """Dispatch on cfg.dgp_kind"""
    if cfg.dgp_kind == "structural":
        return simulate_structural_panel(cfg, p, d, mu_skill_share)
    return simulate_reduced_form_panel(cfg)


def apply_missing_mask(panel: pd.DataFrame, cfg: SynthConfig) -> pd.DataFrame:
    """Drop rows independently with probability missing_rate (no-op at 0)"""
    if cfg.missing_rate <= 0:
        return panel.reset_index(drop=True)
    keep = np.ones(len(panel), dtype=bool)
    for county_id, index in panel.groupby("county_id", sort=True).groups.items():
        rng = county_rng(cfg.rng_seed, STREAM_MISSING, int(county_id))
        keep[np.asarray(index)] = rng.uniform(size=len(index)) >= cfg.missing_rate
    logger.info(f"Missingness mask dropped {int((~keep).sum())} of {len(panel)} rows")
    return panel.loc[keep].reset_index(drop=True)


# ---------------------------------------------------------------------------
# validation and derived columns
# ---------------------------------------------------------------------------

def validate_panel(panel: pd.DataFrame, line_offset: int = 0) -> pd.DataFrame:
    """
    Check the county-year panel contract

    Args:
        panel: candidate panel
        line_offset: added to positional row indices in error messages
            (2 maps rows to file line numbers below the header)

    Returns:
        The panel, sorted by (county_id, year), with canonical dtypes
    """
    if list(panel.columns) != COLUMNS:
        raise PanelFormatError(f"columns must be exactly {','.join(COLUMNS)}; got {','.join(map(str, panel.columns))}")
    if panel.empty:
        raise PanelFormatError("panel has no rows")

    ints = panel[INTEGER_COLUMNS].to_numpy()
    if not np.all(np.equal(np.mod(ints, 1), 0)):
        bad = int(np.argwhere(np.mod(ints, 1) != 0)[0, 0])
        raise PanelFormatError("integer column holds a non-integer value", row=bad + line_offset)

    for column in ("n_br", "n_fs"):
        negative = np.flatnonzero(panel[column].to_numpy() < 0)
        if negative.size:
            raise PanelFormatError(f"{column} must be nonnegative", row=int(negative[0]) + line_offset)

    violation = np.flatnonzero(panel["n_fs"].to_numpy() > panel["n_br"].to_numpy())
    if violation.size:
        i = int(violation[0])
        raise PanelFormatError(
            f"n_fs={panel['n_fs'].iat[i]} exceeds n_br={panel['n_br'].iat[i]} for county "
            f"{panel['county_id'].iat[i]} in {panel['year'].iat[i]}",
            row=i + line_offset,
        )

    values = panel[POSITIVE_COLUMNS].to_numpy(dtype=float)
    bad_rows = np.flatnonzero(~np.all(np.isfinite(values) & (values > 0), axis=1))
    if bad_rows.size:
        raise PanelFormatError("employment, population and wage columns must be finite and positive",
                               row=int(bad_rows[0]) + line_offset)

    duplicated = np.flatnonzero(panel.duplicated(["county_id", "year"]).to_numpy())
    if duplicated.size:
        i = int(duplicated[0])
        raise PanelFormatError(f"duplicate (county_id, year) = ({panel['county_id'].iat[i]}, {panel['year'].iat[i]})",
                               row=i + line_offset)

    geography = panel.groupby("county_id")[["district_id", "state_id"]].nunique()
    ambiguous = geography[(geography > 1).any(axis=1)]
    if not ambiguous.empty:
        raise PanelFormatError(f"county {ambiguous.index[0]} maps to more than one district or state")

    clean = panel.astype({c: np.int64 for c in INTEGER_COLUMNS}).astype({c: np.float64 for c in POSITIVE_COLUMNS})
    return clean.sort_values(["county_id", "year"], kind="mergesort").reset_index(drop=True)


def with_derived_columns(panel: pd.DataFrame) -> pd.DataFrame:
    """Add log outcomes, local bankruptcies and fixed-effect group keys"""
    frame = panel.copy()
    for column in ("emp_legal", "emp_nonlegal", "population", "wage_avg",
                   "emp_skilled", "emp_unskilled", "wage_skilled", "wage_unskilled"):
        frame[f"ln_{column}"] = np.log(frame[column].astype(float))
    frame["n_local"] = frame["n_br"] - frame["n_fs"]
    treated = frame["n_br"] > 0
    frame["ln_n_br"] = np.where(treated, np.log(frame["n_br"].where(treated, 1).astype(float)), np.nan)
    frame["region_id"] = frame["state_id"] % N_REGIONS
    frame["county"] = frame["county_id"]
    frame["district"] = frame["district_id"]
    frame["state"] = frame["state_id"]
    frame["district_year"] = frame["district_id"] * 10_000 + frame["year"]
    frame["state_year"] = frame["state_id"] * 10_000 + frame["year"]
    frame["region_year"] = frame["region_id"] * 10_000 + frame["year"]
    return frame


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def write_panel(panel: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write a validated panel as UTF-8 comma-separated text with the fixed header"""
    clean = validate_panel(panel)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    clean.to_csv(target, index=False, lineterminator="\n", encoding="utf-8")
    logger.info(f"Wrote panel with {len(clean)} rows to {target}")
    return target


def _parse_column(raw: pd.Series, name: str, integer: bool) -> pd.Series:
    try:
        return raw.astype(np.int64) if integer else raw.astype(np.float64)
    except (ValueError, TypeError):
        caster = int if integer else float
        for position, value in enumerate(raw):
            try:
                caster(value)
            except (ValueError, TypeError):
                raise PanelFormatError(f"column {name} cannot parse {value!r}", row=position + 2) from None
        raise


def read_panel(path: Union[str, Path]) -> pd.DataFrame:
    """Read and validate a panel file; errors cite file line numbers"""
    source = Path(path)
    try:
        raw = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise PanelFormatError(f"panel file not found: {source}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise PanelFormatError(f"malformed panel file {source}: {e}") from e

    if list(raw.columns) != COLUMNS:
        raise PanelFormatError(f"header must be {','.join(COLUMNS)}", row=1)

    parsed = pd.DataFrame({
        column: _parse_column(raw[column].str.strip(), column, column in INTEGER_COLUMNS)
        for column in COLUMNS
    })
    panel = validate_panel(parsed, line_offset=2)
    logger.info(f"Read panel with {len(panel)} rows from {source}")
    return panel
