"""
Two-Step Clustered GMM
Log-difference residuals of the legal labor market, stacked block-diagonal
instruments, closed-form stage solutions, clustered weighting and the J-test
"""

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Literal, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
from pydantic import Field, field_validator, model_validator
from scipy.optimize import minimize
from scipy.special import gammaincc

from exceptions import DomainError, EstimationError, RankDeficiencyError
from fe_regress import PIVOT_THRESHOLD, residualize
from model_core import DemandParams, FrozenModel, delta_theta
from panel_synth import with_derived_columns

logger = logging.getLogger(__name__)

PARAM_NAMES = ("inv_rho_s", "inv_rho_u", "alpha")
EQUATIONS = ("wS", "wU", "nS", "nU")
OUTCOME_CHANGES = ("dw_s", "dw_u", "dn_s", "dn_u")
DETREND_CONTROLS = ("d_ln_population", "d_ln_emp_nonlegal")
LAMBDA_CONDITION_WARN = 1e12
EXACT_FIT_RTOL = 1e-20
CROSSCHECK_TOL = 1e-6


@dataclass(frozen=True)
class GmmObservation:
    """One county-year with a defined previous year"""

    county_id: int
    year: int
    dw_s: float
    dw_u: float
    dn_s: float
    dn_u: float
    dtheta: float
    br_t: float
    br_tm1: float


_TERM = re.compile(r"^(?P<variable>br_lag|br)(?:\^(?P<power>\d+))?$")


class InstrumentTerm(FrozenModel):
    """A power of the current or lagged local bankruptcy count"""

    variable: Literal["br", "br_lag"]
    power: int = Field(1, ge=1)

    @classmethod
    def parse(cls, text: str) -> "InstrumentTerm":
        match = _TERM.match(text.strip().replace(" ", ""))
        if match is None:
            raise DomainError(f"instrument term {text!r} is not of the form br^k or br_lag^k")
        return cls(variable=match.group("variable"), power=int(match.group("power") or 1))

    @property
    def label(self) -> str:
        return f"{self.variable}^{self.power}"

    def evaluate(self, br_t: np.ndarray, br_tm1: np.ndarray) -> np.ndarray:
        base = br_t if self.variable == "br" else br_tm1
        return np.power(np.asarray(base, dtype=float), self.power)


def _terms(*labels: str) -> Tuple[InstrumentTerm, ...]:
    return tuple(InstrumentTerm.parse(label) for label in labels)


NAMED_SETS: Dict[str, Dict] = {
    "baseline": {"wage": ("br_lag^1", "br_lag^2", "br_lag^3", "br_lag^4"), "labor": ("br^1", "br_lag^1"),
                 "const_wage": False, "const_labor": True},
    "no_constant": {"wage": ("br_lag^1", "br_lag^2", "br_lag^3", "br_lag^4"), "labor": ("br^1", "br_lag^1"),
                    "const_wage": False, "const_labor": False},
    "with_constant": {"wage": ("br_lag^1", "br_lag^2", "br_lag^3", "br_lag^4"), "labor": ("br^1", "br_lag^1"),
                      "const_wage": True, "const_labor": True},
    "simplified": {"wage": ("br_lag^1",), "labor": ("br^1",), "const_wage": False, "const_labor": True},
}


class GmmSpec(FrozenModel):
    """Instrument lists per equation block and the calibrated (zeta, pi)"""

    wage_instruments: Tuple[InstrumentTerm, ...]
    labor_instruments: Tuple[InstrumentTerm, ...]
    include_constant_wage: bool = False
    include_constant_labor: bool = True
    zeta: float = Field(lt=1)
    pi_share: float = Field(gt=0, lt=1)

    @field_validator("wage_instruments", "labor_instruments", mode="before")
    @classmethod
    def _parse_terms(cls, value):
        if isinstance(value, str):
            value = [part for part in value.split(",") if part.strip()]
        return tuple(InstrumentTerm.parse(v) if isinstance(v, str) else v for v in value)

    @classmethod
    def named(cls, name: str, zeta: float, pi_share: float) -> "GmmSpec":
        """One of the shipped instrument sets: baseline, no_constant, with_constant, simplified"""
        if name not in NAMED_SETS:
            raise DomainError(f"unknown instrument set {name!r}; choose from {', '.join(NAMED_SETS)}")
        entry = NAMED_SETS[name]
        return cls(wage_instruments=_terms(*entry["wage"]), labor_instruments=_terms(*entry["labor"]),
                   include_constant_wage=entry["const_wage"], include_constant_labor=entry["const_labor"],
                   zeta=zeta, pi_share=pi_share)

    @property
    def q_wage(self) -> int:
        return len(self.wage_instruments) + int(self.include_constant_wage)

    @property
    def q_labor(self) -> int:
        return len(self.labor_instruments) + int(self.include_constant_labor)

    @property
    def n_moments(self) -> int:
        return 2 * self.q_wage + 2 * self.q_labor

    @model_validator(mode="after")
    def _blocks_instrumented(self) -> "GmmSpec":
        if self.q_wage == 0 or self.q_labor == 0:
            raise ValueError("each equation block needs at least one instrument")
        return self

    def moment_labels(self) -> List[str]:
        wage = [t.label for t in self.wage_instruments] + (["const"] if self.include_constant_wage else [])
        labor = [t.label for t in self.labor_instruments] + (["const"] if self.include_constant_labor else [])
        return ([f"wS:{z}" for z in wage] + [f"wU:{z}" for z in wage]
                + [f"nS:{z}" for z in labor] + [f"nU:{z}" for z in labor])


@dataclass
class JTest:
    j_stat: float
    df: int
    p_value: float
    just_identified: bool = False


@dataclass
class GmmResult:
    """Two-step estimates with clustered inference and diagnostics"""

    beta_hat: np.ndarray
    vcov_clustered: np.ndarray
    j_stat: float
    j_df: int
    j_pvalue: float
    stage1_beta: np.ndarray
    weight_matrix_2: np.ndarray
    n_obs: int
    n_clusters: int
    n_moments: int
    just_identified: bool = False
    exact_fit: bool = False
    lambda_condition: float = float("nan")
    crosscheck: Dict[str, float] = field(default_factory=dict)
    moment_labels: List[str] = field(default_factory=list)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov_clustered), 0.0, None))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "parameter": list(PARAM_NAMES),
            "estimate": self.beta_hat,
            "std_err": self.std_errors,
            "stage1": self.stage1_beta,
        })

    def summary(self) -> str:
        labels = {"inv_rho_s": "1/rho_s (skilled Frisch)", "inv_rho_u": "1/rho_u (unskilled Frisch)",
                  "alpha": "alpha (returns to scale)"}
        lines = [f"{'parameter':<30}{'estimate':>12}{'std.err':>12}"]
        for name, estimate, se in zip(PARAM_NAMES, self.beta_hat, self.std_errors):
            lines.append(f"{labels[name]:<30}{estimate:>12.4f}{se:>12.4f}")
        if self.just_identified:
            lines.append("J-stat                        just identified")
        else:
            lines.append(f"J-stat {self.j_stat:.3f} (df {self.j_df}, p = {self.j_pvalue:.3f})")
        lines.append(f"observations {self.n_obs}, clusters {self.n_clusters}, moments {self.n_moments}")
        lines.append(f"condition number of Lambda {self.lambda_condition:.3e}")
        if self.exact_fit:
            lines.append("stage-1 moments vanish exactly; second step skipped")
        for key, value in self.crosscheck.items():
            lines.append(f"numeric cross-check {key}: max |diff| {value:.3e}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def build_observations(panel: pd.DataFrame, d: DemandParams) -> pd.DataFrame:
    """
    Difference a panel into GMM observations

    Only county-years whose previous calendar year is present contribute. The
    bankruptcy count entering theta and the instruments is the locally filed
    count n_br - n_fs. Control changes and FE keys are carried for detrending.
    """
    frame = with_derived_columns(panel).sort_values(["county_id", "year"])
    levels = ["ln_wage_skilled", "ln_wage_unskilled", "ln_emp_skilled", "ln_emp_unskilled",
              "ln_population", "ln_emp_nonlegal", "n_local"]
    previous = frame[["county_id", "year", *levels]].assign(year=frame["year"] + 1)
    merged = frame.merge(previous, on=["county_id", "year"], suffixes=("", "_prev"), how="inner")
    if merged.empty:
        raise EstimationError("panel has no county with two consecutive years")

    out = merged[["county_id", "district_id", "state_id", "year", "county", "district", "state",
                  "district_year", "state_year", "region_year"]].copy()
    for name, level in zip(OUTCOME_CHANGES, levels[:4]):
        out[name] = merged[level] - merged[f"{level}_prev"]
    out["d_ln_population"] = merged["ln_population"] - merged["ln_population_prev"]
    out["d_ln_emp_nonlegal"] = merged["ln_emp_nonlegal"] - merged["ln_emp_nonlegal_prev"]
    out["br_t"] = merged["n_local"].astype(float)
    out["br_tm1"] = merged["n_local_prev"].astype(float)
    out["dtheta"] = np.asarray(delta_theta(d, out["br_t"].to_numpy(), out["br_tm1"].to_numpy()), dtype=float)
    out = out.reset_index(drop=True)
    logger.info(f"Built {len(out)} GMM observations from {out['county_id'].nunique()} counties")
    return out


def detrend(observations: pd.DataFrame, controls: Sequence[str] = DETREND_CONTROLS,
            absorb: Sequence[str] = ()) -> pd.DataFrame:
    """Replace the four outcome changes by residuals on controls and fixed effects; dtheta is untouched"""
    if not controls and not absorb:
        return observations.copy()
    out = observations.copy()
    out[list(OUTCOME_CHANGES)] = residualize(observations, OUTCOME_CHANGES, controls, absorb).to_numpy()
    logger.debug(f"Detrended outcome changes on controls {list(controls)} with FE {list(absorb)}")
    return out


def observations_from_records(records: Sequence[GmmObservation]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records])


def _arrays(data: Union[pd.DataFrame, GmmObservation]) -> Dict[str, np.ndarray]:
    if isinstance(data, GmmObservation):
        return {k: np.array([v], dtype=float) for k, v in asdict(data).items()}
    return {k: data[k].to_numpy(dtype=float) for k in ("dw_s", "dw_u", "dn_s", "dn_u", "dtheta", "br_t", "br_tm1")}


# ---------------------------------------------------------------------------
# residuals and instruments
# ---------------------------------------------------------------------------

def residual_parts(data: Union[pd.DataFrame, GmmObservation], spec: GmmSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Affine decomposition u_i(beta) = c_i + J_i beta

    Returns:
        (c, J) with shapes (N, 4) and (N, 4, 3), equations ordered wS, wU, nS, nU
    """
    a = _arrays(data)
    zeta, pi = spec.zeta, spec.pi_share
    dw_s, dw_u, dn_s, dn_u, dtheta = a["dw_s"], a["dw_u"], a["dn_s"], a["dn_u"], a["dtheta"]
    n = len(dw_s)

    constant = np.column_stack([
        dw_s - dtheta - (zeta - 1.0 - zeta * pi) * dn_s + zeta * (1.0 - pi) * dn_u,
        dw_u - dtheta - (zeta - 1.0 - zeta * (1.0 - pi)) * dn_u + zeta * pi * dn_s,
        dn_s,
        dn_u,
    ])
    scale = pi * dn_s + (1.0 - pi) * dn_u
    jacobian = np.zeros((n, 4, 3))
    jacobian[:, 0, 2] = -scale
    jacobian[:, 1, 2] = -scale
    jacobian[:, 2, 0] = -dw_s
    jacobian[:, 3, 1] = -dw_u
    return constant, jacobian


def residuals(beta: Sequence[float], data: Union[pd.DataFrame, GmmObservation], spec: GmmSpec) -> np.ndarray:
    """(N, 4) residuals (wS, wU, nS, nU) at beta = (1/rho_s, 1/rho_u, alpha)"""
    constant, jacobian = residual_parts(data, spec)
    return constant + jacobian @ np.asarray(beta, dtype=float)


def residual_jacobian(data: Union[pd.DataFrame, GmmObservation], spec: GmmSpec) -> np.ndarray:
    """d u_i / d beta', constant in beta"""
    return residual_parts(data, spec)[1]


def build_instruments(data: Union[pd.DataFrame, GmmObservation], spec: GmmSpec) -> np.ndarray:
    """
    Per-observation block-diagonal instrument matrices

    Returns:
        (N, 4, q) array; rows wS and wU carry z^w, rows nS and nU carry z^n
    """
    a = _arrays(data)
    n = len(a["br_t"])
    z_w = [t.evaluate(a["br_t"], a["br_tm1"]) for t in spec.wage_instruments]
    z_n = [t.evaluate(a["br_t"], a["br_tm1"]) for t in spec.labor_instruments]
    if spec.include_constant_wage:
        z_w.append(np.ones(n))
    if spec.include_constant_labor:
        z_n.append(np.ones(n))
    z_w_mat = np.column_stack(z_w)
    z_n_mat = np.column_stack(z_n)

    qw, qn = spec.q_wage, spec.q_labor
    z = np.zeros((n, 4, spec.n_moments))
    z[:, 0, 0:qw] = z_w_mat
    z[:, 1, qw:2 * qw] = z_w_mat
    z[:, 2, 2 * qw:2 * qw + qn] = z_n_mat
    z[:, 3, 2 * qw + qn:] = z_n_mat
    return z


# ---------------------------------------------------------------------------
# criterion and estimation
# ---------------------------------------------------------------------------

@dataclass
class MomentSystem:
    """Per-observation moments g_i(beta) = a_i + B_i beta and their cluster labels"""

    a: np.ndarray
    b: np.ndarray
    clusters: np.ndarray

    @property
    def n_obs(self) -> int:
        return self.a.shape[0]

    @property
    def a_bar(self) -> np.ndarray:
        return self.a.mean(axis=0)

    @property
    def g_bar_jacobian(self) -> np.ndarray:
        """G-bar = (1/N) sum Z_i' dU_i/dbeta'"""
        return self.b.mean(axis=0)

    def contributions(self, beta: np.ndarray) -> np.ndarray:
        return self.a + self.b @ beta

    def moments(self, beta: np.ndarray) -> np.ndarray:
        return self.a_bar + self.g_bar_jacobian @ beta


def moment_system(data: pd.DataFrame, spec: GmmSpec, cluster_column: str = "county_id") -> MomentSystem:
    z = build_instruments(data, spec)
    constant, jacobian = residual_parts(data, spec)
    a = np.einsum("niq,ni->nq", z, constant)
    b = np.einsum("niq,nik->nqk", z, jacobian)
    return MomentSystem(a=a, b=b, clusters=data[cluster_column].to_numpy())


def gmm_criterion(beta: Sequence[float], data: Union[pd.DataFrame, MomentSystem], spec: GmmSpec,
                  weight: np.ndarray) -> float:
    """Q(beta, W) = g-bar' W g-bar"""
    system = data if isinstance(data, MomentSystem) else moment_system(data, spec)
    g = system.moments(np.asarray(beta, dtype=float))
    return float(g @ weight @ g)


def _closed_form_stage(system: MomentSystem, weight: np.ndarray) -> np.ndarray:
    g_jac = system.g_bar_jacobian
    hessian = g_jac.T @ weight @ g_jac
    try:
        return -scipy.linalg.solve(hessian, g_jac.T @ weight @ system.a_bar, assume_a="sym")
    except scipy.linalg.LinAlgError as e:
        raise RankDeficiencyError("moment Jacobian weighted by W is singular", columns=list(PARAM_NAMES)) from e


def _numeric_stage(system: MomentSystem, weight: np.ndarray) -> np.ndarray:
    g_jac = system.g_bar_jacobian
    scale = float(np.trace(g_jac.T @ weight @ g_jac)) or 1.0
    outcome = minimize(lambda b: float(system.moments(b) @ weight @ system.moments(b)) / scale,
                       x0=np.zeros(len(PARAM_NAMES)), method="Powell",
                       options={"xtol": 1e-12, "ftol": 1e-16, "maxiter": 200_000, "maxfev": 400_000})
    return np.asarray(outcome.x)


def check_identification(system: MomentSystem) -> None:
    g_jac = system.g_bar_jacobian
    _, r, pivots = scipy.linalg.qr(g_jac, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > PIVOT_THRESHOLD * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < len(PARAM_NAMES):
        missing = [PARAM_NAMES[i] for i in pivots[rank:]]
        raise RankDeficiencyError(f"moment Jacobian has rank {rank} < 3; unidentified: {', '.join(missing)}",
                                  columns=missing)


def clustered_moment_covariance(system: MomentSystem, beta: np.ndarray) -> np.ndarray:
    """Lambda = (1/N) sum_c s_c s_c', s_c the within-cluster sum of Z_i'u_i"""
    codes, uniques = pd.factorize(pd.Series(system.clusters), sort=True)
    n = system.n_obs
    indicator = scipy.sparse.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, len(uniques)))
    sums = indicator.T @ system.contributions(beta)
    lam = sums.T @ sums / n
    return 0.5 * (lam + lam.T)


def _inverse_weight(lam: np.ndarray) -> Tuple[np.ndarray, float]:
    condition = float(np.linalg.cond(lam))
    if not np.isfinite(condition):
        raise EstimationError("clustered moment covariance is singular; reduce the instrument set")
    if condition > LAMBDA_CONDITION_WARN:
        logger.warning(f"Lambda condition number {condition:.3e} exceeds {LAMBDA_CONDITION_WARN:.0e}")
    try:
        weight = scipy.linalg.solve(lam, np.eye(lam.shape[0]), assume_a="pos")
    except scipy.linalg.LinAlgError as e:
        raise EstimationError("clustered moment covariance is not positive definite; reduce the instrument set") from e
    return 0.5 * (weight + weight.T), condition


def gmm_vcov(system: MomentSystem, weight: np.ndarray) -> np.ndarray:
    """(1/N)(G' W G)^-1"""
    g_jac = system.g_bar_jacobian
    vcov = scipy.linalg.inv(g_jac.T @ weight @ g_jac) / system.n_obs
    return 0.5 * (vcov + vcov.T)


def chi_square_upper_tail(x: float, df: int) -> float:
    """P(chi2_df > x) as the regularized upper incomplete gamma Q(df/2, x/2)"""
    if df <= 0:
        raise DomainError(f"chi-square degrees of freedom must be positive, got {df}")
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def j_test(system: MomentSystem, beta: np.ndarray, weight: np.ndarray) -> JTest:
    """Hansen J = N Q(beta, W) against chi-square with q - 3 degrees of freedom"""
    df = system.a.shape[1] - len(PARAM_NAMES)
    if df <= 0:
        return JTest(j_stat=0.0, df=0, p_value=1.0, just_identified=True)
    g = system.moments(beta)
    j_stat = max(float(system.n_obs * (g @ weight @ g)), 0.0)
    return JTest(j_stat=j_stat, df=df, p_value=chi_square_upper_tail(j_stat, df))


def two_step_gmm(data: pd.DataFrame, spec: GmmSpec, cluster_column: str = "county_id",
                 numeric_check: bool = True) -> GmmResult:
    """
    Two-step GMM with identity first-stage weights and clustered optimal weights

    Both stages are solved in closed form since the moments are affine in beta.

    Args:
        data: GMM observations (see build_observations / detrend)
        spec: instruments and calibration
        cluster_column: cluster label column
        numeric_check: re-solve each stage with Powell's method and record the gap
    """
    system = moment_system(data, spec, cluster_column)
    n_clusters = int(pd.Series(system.clusters).nunique())
    if n_clusters < 2:
        raise EstimationError("clustered GMM needs at least 2 clusters")
    check_identification(system)
    q = spec.n_moments
    crosscheck: Dict[str, float] = {}

    identity = np.eye(q)
    stage1 = _closed_form_stage(system, identity)
    if numeric_check:
        crosscheck["stage1"] = float(np.max(np.abs(_numeric_stage(system, identity) - stage1)))
    logger.info(f"GMM stage 1: beta = {np.round(stage1, 6).tolist()}")

    baseline_q = float(system.a_bar @ system.a_bar)
    if gmm_criterion(stage1, system, spec, identity) <= EXACT_FIT_RTOL * max(baseline_q, 1.0):
        logger.warning("Stage-1 moments vanish exactly; returning stage-1 estimate without a second step")
        return GmmResult(
            beta_hat=stage1, vcov_clustered=np.zeros((3, 3)), j_stat=0.0, j_df=q - 3, j_pvalue=1.0,
            stage1_beta=stage1, weight_matrix_2=identity, n_obs=system.n_obs, n_clusters=n_clusters,
            n_moments=q, just_identified=q == 3, exact_fit=True, crosscheck=crosscheck,
            moment_labels=spec.moment_labels(),
        )

    lam = clustered_moment_covariance(system, stage1)
    weight, condition = _inverse_weight(lam)
    stage2 = _closed_form_stage(system, weight)
    if numeric_check:
        crosscheck["stage2"] = float(np.max(np.abs(_numeric_stage(system, weight) - stage2)))
        if max(crosscheck.values()) > CROSSCHECK_TOL:
            logger.warning(f"Numeric minimizer departs from the closed form by {max(crosscheck.values()):.3e}")

    test = j_test(system, stage2, weight)
    result = GmmResult(
        beta_hat=stage2,
        vcov_clustered=gmm_vcov(system, weight),
        j_stat=test.j_stat,
        j_df=test.df,
        j_pvalue=test.p_value,
        stage1_beta=stage1,
        weight_matrix_2=weight,
        n_obs=system.n_obs,
        n_clusters=n_clusters,
        n_moments=q,
        just_identified=test.just_identified,
        lambda_condition=condition,
        crosscheck=crosscheck,
        moment_labels=spec.moment_labels(),
    )
    logger.info(f"GMM stage 2: beta = {np.round(stage2, 6).tolist()}, J = {test.j_stat:.3f} (p = {test.p_value:.3f})")
    return result


def estimate(panel: pd.DataFrame, d: DemandParams, spec: GmmSpec,
             detrend_controls: Sequence[str] = DETREND_CONTROLS, detrend_absorb: Sequence[str] = (),
             numeric_check: bool = True) -> GmmResult:
    """Panel to GmmResult: difference, detrend, estimate"""
    observations = detrend(build_observations(panel, d), detrend_controls, detrend_absorb)
    return two_step_gmm(observations, spec, numeric_check=numeric_check)
