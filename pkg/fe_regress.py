"""
Fixed-Effects Panel Regression
Within-transformed OLS with county-clustered inference, linear-combination tests,
placebo lags, Poisson pseudo-ML with dummy fixed effects and the CES elasticity back-out
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
import statsmodels.api as sm
from pydantic import Field, field_validator, model_validator
from scipy.stats import norm

from exceptions import ConvergenceError, DomainError, EstimationError, RankDeficiencyError
from model_core import FrozenModel
from panel_synth import with_derived_columns

logger = logging.getLogger(__name__)

FeDimension = Literal["county", "district", "state", "year", "district_year", "state_year", "region_year"]
FE_DIMENSIONS: Tuple[str, ...] = ("county", "district", "state", "year", "district_year", "state_year", "region_year")

DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10_000
PIVOT_THRESHOLD = 1e-10
MIN_CLUSTERS_FOR_NORMAL = 40
MAX_DUMMY_COLUMNS = 2000


class RegressionSpec(FrozenModel):
    """Outcome, regressors, absorbed fixed effects and inference options of one fit"""

    outcome: str
    treatments: Tuple[str, ...] = Field(min_length=1)
    controls: Tuple[str, ...] = ()
    absorb: Tuple[FeDimension, ...] = Field(min_length=1)
    cluster_by: FeDimension = "county"
    lags: Tuple[int, ...] = ()
    lincoms: Tuple[str, ...] = ()

    @field_validator("lags")
    @classmethod
    def _lags_nonnegative(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(lag < 0 for lag in value):
            raise ValueError("lags must be nonnegative integers")
        return value

    @model_validator(mode="after")
    def _roles_disjoint(self) -> "RegressionSpec":
        names = [self.outcome, *self.treatments, *self.controls]
        if len(set(names)) != len(names):
            raise ValueError("outcome, treatments and controls must be disjoint")
        return self

    @property
    def regressors(self) -> List[str]:
        return [*self.treatments, *self.controls]


@dataclass
class LincomTest:
    """Two-sided test of a linear combination of coefficients"""

    expression: str
    estimate: float
    std_err: float
    p_value: float


@dataclass
class RegressionResult:
    """Point estimates, clustered covariance and fit diagnostics"""

    names: List[str]
    coefficients: Dict[str, float]
    vcov_clustered: np.ndarray
    n_obs: int
    n_clusters: int
    within_r2: float
    lincom_tests: List[LincomTest] = field(default_factory=list)
    dof_notes: List[str] = field(default_factory=list)
    outcome: str = ""
    estimator: str = "ols_fe"

    @property
    def params(self) -> np.ndarray:
        return np.array([self.coefficients[name] for name in self.names])

    @property
    def std_errors(self) -> Dict[str, float]:
        diag = np.clip(np.diag(self.vcov_clustered), 0.0, None)
        return dict(zip(self.names, np.sqrt(diag)))

    def to_frame(self) -> pd.DataFrame:
        """Coefficient table: term, estimate, std_err, z, p_value"""
        se = self.std_errors
        rows = []
        for name in self.names:
            estimate = self.coefficients[name]
            z, p = _normal_test(estimate, se[name])
            rows.append({"term": name, "estimate": estimate, "std_err": se[name], "z": z, "p_value": p})
        return pd.DataFrame(rows, columns=["term", "estimate", "std_err", "z", "p_value"])

    def summary(self) -> str:
        lines = [
            f"{self.estimator}: {self.outcome}",
            f"observations {self.n_obs}, clusters {self.n_clusters}, within R2 {self.within_r2:.6f}",
            f"{'term':<24}{'estimate':>14}{'std.err':>14}{'p':>10}",
        ]
        for row in self.to_frame().itertuples(index=False):
            lines.append(f"{row.term:<24}{row.estimate:>14.6f}{row.std_err:>14.6f}{row.p_value:>10.4f}")
        if self.lincom_tests:
            lines.append("linear combinations")
            for test in self.lincom_tests:
                lines.append(f"  {test.expression:<22}{test.estimate:>14.6f}{test.std_err:>14.6f}{test.p_value:>10.4f}")
        lines.extend(f"note: {note}" for note in self.dof_notes)
        return "\n".join(lines)


def _normal_test(estimate: float, std_err: float) -> Tuple[float, float]:
    if std_err > 0:
        z = estimate / std_err
        return z, float(2.0 * norm.sf(abs(z)))
    return (0.0, 1.0) if estimate == 0 else (float(np.sign(estimate) * np.inf), 0.0)


# ---------------------------------------------------------------------------
# fixed-effect absorption
# ---------------------------------------------------------------------------

def _indicator(keys: pd.Series) -> Tuple[scipy.sparse.csr_matrix, np.ndarray]:
    codes, uniques = pd.factorize(keys, sort=True)
    n = len(codes)
    matrix = scipy.sparse.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, len(uniques)))
    counts = np.asarray(matrix.sum(axis=0)).ravel()
    return matrix, counts


def _prepared(panel: pd.DataFrame, absorb: Sequence[str]) -> pd.DataFrame:
    missing = [dim for dim in (*absorb, "county") if dim not in panel.columns]
    return with_derived_columns(panel) if missing else panel


def within_transform(frame: pd.DataFrame, columns: Sequence[str], absorb: Sequence[str],
                     tol: float = DEMEAN_TOL, max_iter: int = DEMEAN_MAX_ITER) -> pd.DataFrame:
    """
    Remove all absorbed fixed effects from the given columns

    Alternates group-demeaning over the absorb dimensions until the largest
    absolute adjustment in a sweep falls below tol.

    Args:
        frame: rows with the FE key columns named by absorb
        columns: numeric columns to transform
        absorb: FE dimensions
        tol: convergence threshold on the max absolute change per sweep
        max_iter: sweep limit

    Returns:
        DataFrame of demeaned columns on frame's index
    """
    if tol <= 0:
        raise DomainError(f"tol must be positive, got {tol}")
    unknown = [dim for dim in absorb if dim not in frame.columns]
    if unknown:
        raise DomainError(f"absorb dimensions not present in panel: {', '.join(unknown)}")

    values = frame[list(columns)].to_numpy(dtype=float).copy()
    if not absorb or values.size == 0:
        return pd.DataFrame(values, index=frame.index, columns=list(columns))

    indicators = [_indicator(frame[dim]) for dim in absorb]
    trace: List[float] = []
    for iteration in range(1, max_iter + 1):
        change = 0.0
        for matrix, counts in indicators:
            means = (matrix.T @ values) / counts[:, None]
            adjustment = matrix @ means
            values -= adjustment
            change = max(change, float(np.max(np.abs(adjustment))))
        trace.append(change)
        if change < tol:
            logger.debug(f"Within transform converged after {iteration} sweeps (change {change:.3e})")
            return pd.DataFrame(values, index=frame.index, columns=list(columns))

    raise ConvergenceError(
        f"alternating demeaning did not converge in {max_iter} sweeps (last change {trace[-1]:.3e})",
        last_change=trace[-1],
        trace=trace[-20:],
    )


def check_full_rank(design: np.ndarray, names: Sequence[str], threshold: float = PIVOT_THRESHOLD) -> None:
    """Raise RankDeficiencyError naming the columns a pivoted QR finds dependent"""
    if design.shape[1] == 0:
        return
    if design.shape[0] < design.shape[1]:
        raise RankDeficiencyError(
            f"{design.shape[0]} observations cannot identify {design.shape[1]} coefficients", columns=list(names))
    _, r, pivots = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        raise RankDeficiencyError(f"all regressors vanish after absorbing fixed effects: {', '.join(names)}",
                                  columns=list(names))
    rank = int(np.sum(diag > threshold * diag[0]))
    if rank < design.shape[1]:
        offending = [names[i] for i in pivots[rank:]]
        raise RankDeficiencyError(f"collinear regressors after absorbing fixed effects: {', '.join(offending)}",
                                  columns=offending)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def cluster_vcov(residuals: np.ndarray, design: np.ndarray, cluster_ids: Sequence,
                 n_params: Optional[int] = None) -> np.ndarray:
    """
    Cluster-robust sandwich with the G/(G-1)*(N-1)/(N-K) small-sample factor

    Args:
        residuals: length-N residual vector
        design: N x K regressor matrix the residuals belong to
        cluster_ids: length-N cluster labels
        n_params: K in the correction factor (defaults to the design's column count)
    """
    u = np.asarray(residuals, dtype=float).ravel()
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, k = x.shape
    k_dof = k if n_params is None else n_params

    indicator, _ = _indicator(pd.Series(np.asarray(cluster_ids)))
    g = indicator.shape[1]
    if g < 2:
        raise EstimationError("cluster-robust variance needs at least 2 clusters")
    if n <= k_dof:
        raise EstimationError(f"no residual degrees of freedom (N={n}, K={k_dof})")

    bread = scipy.linalg.inv(x.T @ x)
    cluster_scores = indicator.T @ (x * u[:, None])
    meat = cluster_scores.T @ cluster_scores
    factor = g / (g - 1.0) * (n - 1.0) / (n - k_dof)
    vcov = factor * bread @ meat @ bread
    return 0.5 * (vcov + vcov.T)


_TERM = re.compile(r"^(?:(?P<coef>[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*\*\s*)?(?P<name>[A-Za-z_]\w*)$")


def parse_lincom(expression: str) -> Dict[str, float]:
    """Parse "a*x + b*y - z" into {x: a, y: b, z: -1}"""
    weights: Dict[str, float] = {}
    text = re.sub(r"(?<![eE])-", "+-", expression.replace(" ", ""))
    for raw in filter(None, text.split("+")):
        sign = -1.0 if raw.startswith("-") else 1.0
        match = _TERM.match(raw.lstrip("-"))
        if match is None:
            raise DomainError(f"cannot parse term {raw!r} in linear combination {expression!r}")
        coef = float(match.group("coef")) if match.group("coef") else 1.0
        weights[match.group("name")] = weights.get(match.group("name"), 0.0) + sign * coef
    if not weights:
        raise DomainError(f"empty linear combination {expression!r}")
    return weights


def lincom(result: RegressionResult, weights: Mapping[str, float], expression: Optional[str] = None) -> LincomTest:
    """Estimate w'b with variance w'Vw and a two-sided normal p-value"""
    unknown = [name for name in weights if name not in result.coefficients]
    if unknown:
        raise DomainError(f"linear combination refers to unknown coefficients: {', '.join(unknown)}")
    w = np.array([weights.get(name, 0.0) for name in result.names])
    estimate = float(w @ result.params)
    variance = float(w @ result.vcov_clustered @ w)
    std_err = float(np.sqrt(max(variance, 0.0)))
    _, p_value = _normal_test(estimate, std_err)
    label = expression or " + ".join(f"{v:g}*{k}" for k, v in weights.items())
    return LincomTest(expression=label, estimate=estimate, std_err=std_err, p_value=p_value)


# ---------------------------------------------------------------------------
# linear fixed-effects estimators
# ---------------------------------------------------------------------------

def ols_fe(panel: pd.DataFrame, spec: RegressionSpec) -> RegressionResult:
    """
    Least squares on within-transformed data with clustered standard errors

    Rows with a missing value in any used column are dropped first. Degrees of
    freedom for the cluster correction count the explicit regressors only.
    """
    frame = _prepared(panel, spec.absorb)
    used = [spec.outcome, *spec.regressors]
    missing = [column for column in used if column not in frame.columns]
    if missing:
        raise DomainError(f"columns not in panel: {', '.join(missing)}")
    frame = frame.dropna(subset=used)
    if frame.empty:
        raise EstimationError("no complete rows for the requested regression")

    demeaned = within_transform(frame, used, spec.absorb)
    y = demeaned[spec.outcome].to_numpy()
    x = demeaned[spec.regressors].to_numpy()
    check_full_rank(x, spec.regressors)

    beta, *_ = scipy.linalg.lstsq(x, y)
    residuals = y - x @ beta
    clusters = frame[spec.cluster_by].to_numpy()
    vcov = cluster_vcov(residuals, x, clusters)
    n_clusters = int(pd.Series(clusters).nunique())

    total = float(y @ y)
    within_r2 = 1.0 - float(residuals @ residuals) / total if total > 0 else 1.0
    notes = [f"absorbed: {', '.join(spec.absorb)}; clustered by {spec.cluster_by}",
             f"small-sample factor G/(G-1)*(N-1)/(N-K) with K={len(spec.regressors)}"]
    if n_clusters < MIN_CLUSTERS_FOR_NORMAL:
        logger.warning(f"Only {n_clusters} clusters; normal p-values may be unreliable")
        notes.append(f"{n_clusters} clusters (< {MIN_CLUSTERS_FOR_NORMAL}); normal reference is approximate")

    result = RegressionResult(
        names=list(spec.regressors),
        coefficients=dict(zip(spec.regressors, map(float, beta))),
        vcov_clustered=vcov,
        n_obs=len(frame),
        n_clusters=n_clusters,
        within_r2=within_r2,
        dof_notes=notes,
        outcome=spec.outcome,
    )
    result.lincom_tests = [lincom(result, parse_lincom(text), text) for text in spec.lincoms]
    logger.info(f"OLS-FE fit of {spec.outcome}: {len(frame)} rows, {n_clusters} clusters, within R2 {within_r2:.4f}")
    return result


def add_lags(panel: pd.DataFrame, columns: Sequence[str], lags: Sequence[int]) -> Tuple[pd.DataFrame, List[str]]:
    """Attach within-county lags named <column>_lag<k>; undefined lags are NaN"""
    frame = panel.copy()
    names: List[str] = []
    for lag in sorted(set(lags)):
        if lag == 0:
            continue
        for column in columns:
            name = f"{column}_lag{lag}"
            shifted = panel[["county_id", "year", column]].rename(columns={column: name})
            shifted = shifted.assign(year=shifted["year"] + lag)
            frame = frame.merge(shifted, on=["county_id", "year"], how="left")
            names.append(name)
    return frame, names


def placebo_lags(panel: pd.DataFrame, spec: RegressionSpec,
                 lagged: Optional[Sequence[str]] = None) -> RegressionResult:
    """
    Re-fit with lagged bankruptcy counts added as regressors

    Only the columns in lagged are lagged; by default that is the first
    treatment, the bankruptcy count. Lags are taken within county on calendar
    years; county-years whose lag is undefined are dropped. A lag structure of
    only 0 reproduces ols_fe.
    """
    frame = _prepared(panel, spec.absorb)
    columns = list(lagged) if lagged is not None else [spec.treatments[0]]
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise DomainError(f"columns to lag not in panel: {', '.join(missing)}")
    positive = sorted({lag for lag in spec.lags if lag > 0})
    if positive and max(positive) >= frame["year"].nunique():
        raise DomainError(f"lag {max(positive)} needs more than {frame['year'].nunique()} years")
    frame, lag_names = add_lags(frame, columns, positive)
    lagged_spec = spec.model_copy(update={"treatments": (*spec.treatments, *lag_names)})
    result = ols_fe(frame, lagged_spec)
    result.estimator = f"placebo lags {tuple(positive)} of {', '.join(columns)}"
    return result


def residualize(frame: pd.DataFrame, columns: Sequence[str], controls: Sequence[str] = (),
                absorb: Sequence[str] = ()) -> pd.DataFrame:
    """
    Residuals of each column from a projection on controls and absorbed fixed effects

    No intercept is added beyond the absorbed effects. Controls left without
    variation after absorption are dropped with a warning.
    """
    if not controls and not absorb:
        return frame[list(columns)].astype(float).copy()
    demeaned = within_transform(frame, [*columns, *controls], absorb)
    active = [c for c in controls if np.max(np.abs(demeaned[c].to_numpy()), initial=0.0) > PIVOT_THRESHOLD]
    if len(active) < len(controls):
        logger.warning(f"Controls without variation dropped: {', '.join(c for c in controls if c not in active)}")
    if not active:
        return demeaned[list(columns)]
    x = demeaned[active].to_numpy()
    check_full_rank(x, active)
    y = demeaned[list(columns)].to_numpy()
    coef, *_ = scipy.linalg.lstsq(x, y)
    return pd.DataFrame(y - x @ coef, index=frame.index, columns=list(columns))


# ---------------------------------------------------------------------------
# Poisson pseudo-ML
# ---------------------------------------------------------------------------

def _fe_dummies(frame: pd.DataFrame, absorb: Sequence[str]) -> pd.DataFrame:
    """Constant plus a linearly independent subset of the absorb dummies"""
    blocks = [pd.get_dummies(frame[dim].astype(str), prefix=dim, drop_first=True, dtype=float) for dim in absorb]
    dummies = pd.concat(blocks, axis=1) if blocks else pd.DataFrame(index=frame.index)
    if dummies.shape[1] > MAX_DUMMY_COLUMNS:
        raise EstimationError(f"{dummies.shape[1]} dummy columns exceed the limit of {MAX_DUMMY_COLUMNS}")
    if dummies.shape[1] > 0.8 * MAX_DUMMY_COLUMNS:
        logger.warning(f"Poisson design carries {dummies.shape[1]} dummy columns")
    block = pd.concat([pd.Series(1.0, index=frame.index, name="const"), dummies], axis=1)
    matrix = block.to_numpy()
    if matrix.shape[1] > 1:
        _, r, pivots = scipy.linalg.qr(matrix, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > PIVOT_THRESHOLD * diag[0]))
        keep = sorted(pivots[:rank])
        block = block.iloc[:, keep]
    return block


def poisson_pml(y: np.ndarray, design: np.ndarray, cluster_ids: Sequence, names: Sequence[str],
                tol: float = 1e-8, max_iter: int = 200):
    """
    Poisson pseudo-ML with log link by IRLS and cluster-robust covariance

    Returns:
        statsmodels GLM results object
    """
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise DomainError("Poisson outcome must be finite and nonnegative")
    if not np.any(y > 0):
        raise EstimationError("Poisson outcome is zero everywhere; the log-link fit is undefined")
    codes, _ = pd.factorize(pd.Series(np.asarray(cluster_ids)))
    model = sm.GLM(y, pd.DataFrame(design, columns=list(names)), family=sm.families.Poisson())
    fit = model.fit(method="IRLS", tol=tol, tol_criterion="params", maxiter=max_iter,
                    cov_type="cluster", cov_kwds={"groups": codes})
    if not getattr(fit, "converged", True):
        trace = [float(v) for v in fit.fit_history.get("deviance", [])]
        raise ConvergenceError(f"Poisson IRLS did not converge in {max_iter} iterations",
                               last_change=abs(trace[-1] - trace[-2]) if len(trace) > 1 else None, trace=trace)
    return fit


def poisson_fe(panel: pd.DataFrame, spec: RegressionSpec) -> RegressionResult:
    """
    Poisson pseudo-ML with explicit fixed-effect dummies, clustered standard errors

    Only the treatment and control coefficients are reported.
    """
    frame = _prepared(panel, spec.absorb)
    used = [spec.outcome, *spec.regressors]
    frame = frame.dropna(subset=used)
    if frame.empty:
        raise EstimationError("no complete rows for the Poisson regression")

    y = frame[spec.outcome].to_numpy(dtype=float)
    for dim in spec.absorb:
        totals = pd.Series(y, index=frame.index).groupby(frame[dim]).sum()
        if (totals <= 0).any():
            raise ConvergenceError(f"fixed effect {dim}={totals[totals <= 0].index[0]} has an all-zero outcome "
                                   f"(separation); its dummy diverges")

    fe_block = _fe_dummies(frame, spec.absorb)
    x = frame[spec.regressors].to_numpy(dtype=float)
    design = np.column_stack([x, fe_block.to_numpy()])
    names = [*spec.regressors, *fe_block.columns]
    check_full_rank(design, names)

    fit = poisson_pml(y, design, frame[spec.cluster_by].to_numpy(), names)
    k = len(spec.regressors)
    params = np.asarray(fit.params)[:k]
    vcov = np.asarray(fit.cov_params())[:k, :k]
    n_clusters = int(frame[spec.cluster_by].nunique())
    pseudo_r2 = 1.0 - fit.deviance / fit.null_deviance if fit.null_deviance > 0 else 1.0

    result = RegressionResult(
        names=list(spec.regressors),
        coefficients=dict(zip(spec.regressors, map(float, params))),
        vcov_clustered=0.5 * (vcov + vcov.T),
        n_obs=len(frame),
        n_clusters=n_clusters,
        within_r2=float(pseudo_r2),
        dof_notes=[f"Poisson IRLS with {fe_block.shape[1]} intercept/dummy columns; R2 is deviance-based",
                   f"iterations {fit.fit_history.get('iteration', 'n/a')}"],
        outcome=spec.outcome,
        estimator="poisson_fe",
    )
    result.lincom_tests = [lincom(result, parse_lincom(text), text) for text in spec.lincoms]
    logger.info(f"Poisson-FE fit of {spec.outcome}: {len(frame)} rows, {fe_block.shape[1]} FE columns")
    return result


# ---------------------------------------------------------------------------
# CES elasticity back-out
# ---------------------------------------------------------------------------

def delta_from_betas(beta_u: float, beta_u_w: float) -> float:
    """delta = (1/beta_u - 1) / (beta_u_w / beta_u)"""
    if beta_u == 0 or beta_u_w == 0:
        raise DomainError(f"delta back-out needs nonzero elasticities, got beta_u={beta_u}, beta_u_w={beta_u_w}")
    return (1.0 / beta_u - 1.0) / (beta_u_w / beta_u)


@dataclass
class DeltaEstimate:
    beta_u: float
    beta_u_w: float
    delta: float
    employment_fit: RegressionResult
    wage_fit: RegressionResult

    def summary(self) -> str:
        return (f"employment elasticity {self.beta_u:.6f}\n"
                f"wage elasticity {self.beta_u_w:.6f}\n"
                f"implied delta {self.delta:.4f}")


def estimate_delta(panel: pd.DataFrame,
                   controls: Sequence[str] = ("ln_population", "ln_emp_nonlegal"),
                   absorb: Sequence[FeDimension] = ("county", "state_year")) -> DeltaEstimate:
    """
    Back out the substitution elasticity from two Poisson fits on treated county-years

    Unskilled employment and the unskilled wage are each fitted on ln(n_br) with
    the given controls and fixed effects; the two elasticities enter delta_from_betas.
    """
    frame = with_derived_columns(panel) if "ln_n_br" not in panel.columns else panel
    treated = frame[frame["n_br"] > 0]
    if treated.empty:
        raise EstimationError("no county-years with bankruptcies; cannot back out delta")

    def fit(outcome: str) -> RegressionResult:
        spec = RegressionSpec(outcome=outcome, treatments=("ln_n_br",), controls=tuple(controls),
                              absorb=tuple(absorb), cluster_by="county")
        return poisson_fe(treated, spec)

    employment = fit("emp_unskilled")
    wage = fit("wage_unskilled")
    beta_u = employment.coefficients["ln_n_br"]
    beta_u_w = wage.coefficients["ln_n_br"]
    delta = delta_from_betas(beta_u, beta_u_w)
    logger.info(f"Delta back-out: beta_u={beta_u:.5f}, beta_u_w={beta_u_w:.5f}, delta={delta:.4f}")
    return DeltaEstimate(beta_u=beta_u, beta_u_w=beta_u_w, delta=delta, employment_fit=employment, wage_fit=wage)
