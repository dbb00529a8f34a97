"""
Welfare Analysis
Consumption equivalent variation of the no-forum-shopping counterfactual and
the employment gains lost to forum shopping
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Literal, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import Field, field_validator, model_validator
from scipy.optimize import brentq

from exceptions import DomainError, EstimationError
from fe_regress import RegressionResult
from model_core import DemandParams, FrozenModel, ModelParamsGmm, delta_theta, equilibrium_response, skill_share

logger = logging.getLogger(__name__)

EV_LOWER = -0.99
EV_UPPER = 10.0
EV_XTOL = 1e-14


class HouseholdPath(FrozenModel):
    """Consumption and hours of one worker type over t = 0..T"""

    consumption: Tuple[float, ...] = Field(min_length=1)
    labor: Tuple[float, ...] = Field(min_length=1)
    rho: float = Field(gt=0)
    sigma_curv: float = Field(gt=0)
    beta_disc: float = Field(gt=0, lt=1)

    @field_validator("sigma_curv")
    @classmethod
    def _not_log(cls, value: float) -> float:
        if value == 1.0:
            raise ValueError("sigma_curv = 1 (log utility) is not supported")
        return value

    @model_validator(mode="after")
    def _ghh_argument_positive(self) -> "HouseholdPath":
        if len(self.consumption) != len(self.labor):
            raise ValueError("consumption and labor paths differ in length")
        if min(self.consumption) <= 0 or min(self.labor) <= 0:
            raise ValueError("consumption and labor must be strictly positive")
        for t, value in enumerate(ghh_argument(self)):
            if value <= 0:
                raise ValueError(f"GHH argument c - n^(1+rho)/(1+rho) is nonpositive in period {t}")
        return self

    @property
    def horizon(self) -> int:
        return len(self.consumption) - 1


def ghh_argument(path: HouseholdPath, eps: float = 0.0) -> np.ndarray:
    c = np.asarray(path.consumption, dtype=float)
    n = np.asarray(path.labor, dtype=float)
    return c * (1.0 + eps) - n ** (1.0 + path.rho) / (1.0 + path.rho)


def lifetime_utility(path: HouseholdPath, eps: float = 0.0) -> float:
    """sum_t beta^t (c_t(1+eps) - n_t^(1+rho)/(1+rho))^(1-sigma) / (1-sigma)"""
    argument = ghh_argument(path, eps)
    bad = np.flatnonzero(argument <= 0)
    if bad.size:
        raise DomainError(f"GHH argument nonpositive in period {int(bad[0])} at eps={eps}")
    sigma = path.sigma_curv
    terms = path.beta_disc ** np.arange(len(argument)) * argument ** (1.0 - sigma) / (1.0 - sigma)
    return math.fsum(terms)


def equivalent_variation(factual: HouseholdPath, counterfactual: HouseholdPath) -> float:
    """
    Uniform consumption scaling eps that makes the factual path as good as the counterfactual

    Solved by Brent's method on (max(-0.99, feasibility bound), 10); utility is
    strictly increasing in eps.
    """
    if (factual.horizon, factual.beta_disc, factual.sigma_curv) != (
            counterfactual.horizon, counterfactual.beta_disc, counterfactual.sigma_curv):
        raise DomainError("factual and counterfactual paths must share horizon, beta_disc and sigma_curv")
    target = lifetime_utility(counterfactual)

    def gap(eps: float) -> float:
        return lifetime_utility(factual, eps) - target

    if gap(0.0) == 0.0:
        return 0.0

    c = np.asarray(factual.consumption, dtype=float)
    disutility = np.asarray(factual.labor, dtype=float) ** (1.0 + factual.rho) / (1.0 + factual.rho)
    feasible = float(np.max(disutility / c)) - 1.0
    lower = max(EV_LOWER, feasible + 1e-12 * (1.0 + abs(feasible)))
    low_gap, high_gap = gap(lower), gap(EV_UPPER)
    if low_gap > 0 or high_gap < 0:
        raise EstimationError(f"equivalent variation not bracketed on ({lower:.6g}, {EV_UPPER}); "
                              f"gaps {low_gap:.3e}, {high_gap:.3e}")
    return float(brentq(gap, lower, EV_UPPER, xtol=EV_XTOL, rtol=4 * np.finfo(float).eps, maxiter=500))


# ---------------------------------------------------------------------------
# no-forum-shopping counterfactual
# ---------------------------------------------------------------------------

@dataclass
class CountyPaths:
    """Factual and counterfactual paths of both worker types in one county"""

    county_id: int
    skilled: Tuple[HouseholdPath, HouseholdPath]
    unskilled: Tuple[HouseholdPath, HouseholdPath]
    local_bankruptcies: int
    emp_legal: float


def _type_levels(dev: np.ndarray, multipliers: np.ndarray, anchors: Tuple[float, float, float, float]):
    w_s0, w_u0, n_s0, n_u0 = anchors
    return (w_s0 * np.exp(multipliers[0] * dev), w_u0 * np.exp(multipliers[1] * dev),
            n_s0 * np.exp(multipliers[2] * dev), n_u0 * np.exp(multipliers[3] * dev))


def counterfactual_no_fs(panel: pd.DataFrame, p: ModelParamsGmm, d: DemandParams,
                         mu_skill_share: float = 0.42, wage_unskilled_0: float = 1.0) -> Dict[int, CountyPaths]:
    """
    Factual and no-forum-shopping household paths for every county

    Each year's demand deviation from the zero-bankruptcy steady state is
    delta_theta(d, BR_t, 0), with BR = n_br - n_fs in the factual world and
    BR = n_br when every case is filed locally. The noise-free log-difference
    system maps the deviation into wages and hours around the anchors
    n_s = mu, n_u = 1 - mu, w_u = wage_unskilled_0, w_s = A * wage_unskilled_0;
    consumption is c = w n.
    """
    if not 0.0 < mu_skill_share < 1.0:
        raise DomainError(f"mu_skill_share must lie in (0, 1), got {mu_skill_share}")
    pi_share = skill_share(mu_skill_share, 1.0 - mu_skill_share, p)
    multipliers = equilibrium_response(pi_share, p)
    anchors = (p.a_rel * wage_unskilled_0, wage_unskilled_0, mu_skill_share, 1.0 - mu_skill_share)

    def paths(br: np.ndarray) -> Tuple[HouseholdPath, HouseholdPath]:
        dev = np.asarray(delta_theta(d, br, np.zeros_like(br)), dtype=float)
        w_s, w_u, n_s, n_u = _type_levels(np.atleast_1d(dev), multipliers, anchors)
        common = {"sigma_curv": p.sigma_curv, "beta_disc": p.beta_disc}
        skilled = HouseholdPath(consumption=tuple(w_s * n_s), labor=tuple(n_s), rho=p.rho_s, **common)
        unskilled = HouseholdPath(consumption=tuple(w_u * n_u), labor=tuple(n_u), rho=p.rho_u, **common)
        return skilled, unskilled

    out: Dict[int, CountyPaths] = {}
    for county_id, block in panel.sort_values(["county_id", "year"]).groupby("county_id", sort=True):
        n_br = block["n_br"].to_numpy(dtype=float)
        local = n_br - block["n_fs"].to_numpy(dtype=float)
        fact_s, fact_u = paths(local)
        cf_s, cf_u = paths(n_br)
        out[int(county_id)] = CountyPaths(
            county_id=int(county_id),
            skilled=(fact_s, cf_s),
            unskilled=(fact_u, cf_u),
            local_bankruptcies=int(local.sum()),
            emp_legal=float(block["emp_legal"].mean()),
        )
    logger.info(f"Built factual and counterfactual paths for {len(out)} counties")
    return out


@dataclass
class EvTable:
    per_county: pd.DataFrame
    summary: pd.DataFrame
    weighting: str

    def render(self) -> str:
        lines = [f"consumption equivalent variation (%, {self.weighting}-weighted, counties with local bankruptcies)",
                 f"{'sigma':<10}{'skilled':>12}{'unskilled':>12}{'counties':>10}"]
        for row in self.summary.itertuples(index=False):
            lines.append(f"{row.sigma:<10g}{100 * row.ev_skilled:>11.4f}%{100 * row.ev_unskilled:>11.4f}%"
                         f"{row.n_counties:>10d}")
        return "\n".join(lines)


def ev_table(panel: pd.DataFrame, p: ModelParamsGmm, d: DemandParams, sigmas: Sequence[float] = (2.0, 0.5),
             weighting: Literal["county", "employment"] = "county", mu_skill_share: float = 0.42,
             wage_unskilled_0: float = 1.0) -> EvTable:
    """
    Per-county EV for each curvature regime and its average over counties that
    saw at least one locally filed bankruptcy
    """
    if weighting not in ("county", "employment"):
        raise DomainError(f"weighting must be 'county' or 'employment', got {weighting!r}")
    rows = []
    summary = []
    for sigma in sigmas:
        params = ModelParamsGmm(**{**p.model_dump(), "sigma_curv": float(sigma)})
        counties = counterfactual_no_fs(panel, params, d, mu_skill_share, wage_unskilled_0)
        for county in counties.values():
            rows.append({
                "sigma": float(sigma),
                "county_id": county.county_id,
                "ev_skilled": equivalent_variation(*county.skilled),
                "ev_unskilled": equivalent_variation(*county.unskilled),
                "emp_legal": county.emp_legal,
                "local_bankruptcies": county.local_bankruptcies,
            })
        frame = pd.DataFrame([r for r in rows if r["sigma"] == float(sigma) and r["local_bankruptcies"] > 0])
        if frame.empty:
            summary.append({"sigma": float(sigma), "ev_skilled": 0.0, "ev_unskilled": 0.0, "n_counties": 0})
            continue
        weights = frame["emp_legal"].to_numpy() if weighting == "employment" else np.ones(len(frame))
        summary.append({
            "sigma": float(sigma),
            "ev_skilled": float(np.average(frame["ev_skilled"], weights=weights)),
            "ev_unskilled": float(np.average(frame["ev_unskilled"], weights=weights)),
            "n_counties": int(len(frame)),
        })
        logger.info(f"EV at sigma={sigma}: skilled {summary[-1]['ev_skilled']:.6f}, "
                    f"unskilled {summary[-1]['ev_unskilled']:.6f} over {len(frame)} counties")
    per_county = pd.DataFrame(rows, columns=["sigma", "county_id", "ev_skilled", "ev_unskilled",
                                             "emp_legal", "local_bankruptcies"])
    return EvTable(per_county=per_county, summary=pd.DataFrame(summary), weighting=weighting)


# ---------------------------------------------------------------------------
# employment gains lost
# ---------------------------------------------------------------------------

@dataclass
class GainsLost:
    by_year: pd.DataFrame
    jobs_lost_per_year: float
    share_of_potential: float

    def render(self) -> str:
        lines = [f"{'year':<8}{'potential':>14}{'lost':>14}{'share':>10}"]
        for row in self.by_year.itertuples(index=False):
            lines.append(f"{row.year:<8d}{row.potential_jobs:>14.3f}{row.jobs_lost:>14.3f}{row.share:>10.4f}")
        lines.append(f"average jobs lost per year {self.jobs_lost_per_year:.3f}; "
                     f"share of potential gains {self.share_of_potential:.4f}")
        return "\n".join(lines)


def gains_lost(result: Union[RegressionResult, Mapping[str, float]], panel: pd.DataFrame,
               br_term: str = "n_br", fs_term: str = "n_fs") -> GainsLost:
    """
    Jobs the forum-shopped bankruptcies would have created locally

    potential = gamma_BR * n_br * emp_legal and lost = -gamma_FS * n_fs * emp_legal
    per county-year (log points times levels), summed by year.
    """
    coefficients = result.coefficients if isinstance(result, RegressionResult) else dict(result)
    missing = [term for term in (br_term, fs_term) if term not in coefficients]
    if missing:
        raise DomainError(f"coefficients missing for {', '.join(missing)}")
    gamma_br, gamma_fs = coefficients[br_term], coefficients[fs_term]

    frame = pd.DataFrame({
        "year": panel["year"].astype(int),
        "potential_jobs": gamma_br * panel["n_br"].astype(float) * panel["emp_legal"].astype(float),
        "jobs_lost": -gamma_fs * panel["n_fs"].astype(float) * panel["emp_legal"].astype(float),
    })
    by_year = frame.groupby("year", sort=True).sum().reset_index()
    by_year["share"] = np.where(by_year["potential_jobs"] != 0,
                                by_year["jobs_lost"] / by_year["potential_jobs"].where(by_year["potential_jobs"] != 0, 1.0),
                                0.0)
    potential = math.fsum(frame["potential_jobs"])
    lost = math.fsum(frame["jobs_lost"])
    share = lost / potential if potential != 0 else 0.0
    per_year = lost / by_year.shape[0] if by_year.shape[0] else 0.0
    logger.info(f"Gains lost: {per_year:.2f} jobs per year, {share:.2%} of potential")
    return GainsLost(by_year=by_year, jobs_lost_per_year=per_year, share_of_potential=share)
