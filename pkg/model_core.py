"""
Legal Services Economy Model
Closed-form household labor supply, CES labor demand (classic and GMM
parameterizations), labor market equilibrium and the forum-shopping demand channel
"""

import logging
from typing import Any, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from exceptions import DomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class FrozenModel(BaseModel):
    """Immutable parameter object; validation failures surface as DomainError"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    def __init__(self, **data: Any):
        try:
            super().__init__(**data)
        except ValidationError as e:
            raise DomainError(f"invalid {type(self).__name__}: {_first_error(e)}") from e


def _first_error(error: ValidationError) -> str:
    details = error.errors()[0]
    where = ".".join(str(part) for part in details.get("loc", ()))
    return f"{where}: {details.get('msg', 'invalid value')}" if where else details.get("msg", "invalid value")


class ModelParamsClassic(FrozenModel):
    """Static-model parameterization: GHH households and a two-factor CES with A_s, A_u"""

    gamma_disutility: float = Field(1.0, gt=0)
    rho_s: float = Field(gt=0)
    rho_u: float = Field(gt=0)
    delta: float = Field(gt=0)
    a_s: float = Field(gt=0)
    a_u: float = Field(gt=0)
    sigma_curv: float = Field(2.0, gt=0)
    beta_disc: float = Field(0.96, gt=0, lt=1)

    @property
    def substitution_exponent(self) -> float:
        """(δ-1)/δ, the exponent inside the CES aggregator"""
        return (self.delta - 1.0) / self.delta

    def to_gmm(self) -> Tuple["ModelParamsGmm", float]:
        """
        Express the classic technology in the GMM parameterization

        Classic output equals GMM output with alpha=1, share_lambda=1/2,
        a_rel=A_s/A_u and theta=A_u*2^(1/zeta). The disutility scale gamma has no
        GMM counterpart and is dropped.

        Returns:
            (ModelParamsGmm, theta) pair
        """
        if self.delta == 1.0:
            raise DomainError("Cobb-Douglas limit (delta = 1) has no GMM representation")
        zeta = self.substitution_exponent
        gmm = ModelParamsGmm(
            zeta=zeta,
            share_lambda=0.5,
            a_rel=self.a_s / self.a_u,
            alpha=1.0,
            rho_s=self.rho_s,
            rho_u=self.rho_u,
            sigma_curv=self.sigma_curv,
            beta_disc=self.beta_disc,
        )
        theta = self.a_u * 2.0 ** (1.0 / zeta)
        return gmm, theta


class ModelParamsGmm(FrozenModel):
    """GMM-model parameterization: L = theta[(1-lambda)n_u^zeta + lambda(A n_s)^zeta]^(alpha/zeta)"""

    zeta: float = Field(lt=1)
    share_lambda: float = Field(gt=0, lt=1)
    a_rel: float = Field(gt=0)
    alpha: float = Field(gt=0)
    rho_s: float = Field(gt=0)
    rho_u: float = Field(gt=0)
    sigma_curv: float = Field(2.0, gt=0)
    beta_disc: float = Field(0.96, gt=0, lt=1)
    gamma_disutility: float = Field(1.0, gt=0)


class DemandParams(FrozenModel):
    """County demand for legal services and the per-bankruptcy increments"""

    l_bar_county: float = Field(10.0, gt=0)
    phi_fees: float = Field(1.0, gt=0)
    shock_scale: float = Field(1.0, gt=0)
    l_other: float = Field(1.0, ge=0)
    l_bar_br: float = Field(0.0, ge=0)


class EquilibriumState(FrozenModel):
    """Equilibrium hours and wages at an exogenous level of legal-services demand"""

    n_s: float = Field(gt=0)
    n_u: float = Field(gt=0)
    w_s: float = Field(gt=0)
    w_u: float = Field(gt=0)
    l_demand: float = Field(gt=0)


class Calibration(FrozenModel):
    """Calibrated production block: targets and the implied zeta, lambda and skill share"""

    mu_skill_share: float = Field(gt=0, lt=1)
    wage_premium: float = Field(gt=0)
    subst_elasticity: float = Field(gt=0)
    zeta: float
    share_lambda: float = Field(gt=0, lt=1)
    pi_share: float = Field(gt=0, lt=1)

    @model_validator(mode="after")
    def _zeta_matches_elasticity(self) -> "Calibration":
        if abs(self.zeta - zeta_from_elasticity(self.subst_elasticity)) > 1e-12:
            raise ValueError("zeta inconsistent with subst_elasticity")
        return self


# ---------------------------------------------------------------------------
# argument guards
# ---------------------------------------------------------------------------

def _require_positive(**values: ArrayLike) -> None:
    for name, value in values.items():
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise DomainError(f"{name} must be finite and strictly positive, got {value!r}")


def _require_nonnegative(**values: ArrayLike) -> None:
    for name, value in values.items():
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise DomainError(f"{name} must be finite and nonnegative, got {value!r}")


def _scalar(value: ArrayLike) -> ArrayLike:
    arr = np.asarray(value)
    return float(arr) if arr.ndim == 0 else arr


# ---------------------------------------------------------------------------
# household side
# ---------------------------------------------------------------------------

def labor_supply(wage: ArrayLike, rho: float, gamma_disutility: float = 1.0) -> ArrayLike:
    """GHH labor supply n = (w/gamma)^(1/rho)"""
    _require_positive(wage=wage, rho=rho, gamma_disutility=gamma_disutility)
    return _scalar(np.power(np.asarray(wage, dtype=float) / gamma_disutility, 1.0 / rho))


def frisch_elasticity(rho: float) -> float:
    """Frisch elasticity of labor supply, 1/rho"""
    _require_positive(rho=rho)
    return 1.0 / rho


# ---------------------------------------------------------------------------
# classic technology
# ---------------------------------------------------------------------------

def _classic_exponent(p: ModelParamsClassic) -> float:
    if p.delta == 1.0:
        raise DomainError("Cobb-Douglas limit (delta = 1) is not supported")
    return p.substitution_exponent


def ces_output_classic(n_s: ArrayLike, n_u: ArrayLike, p: ModelParamsClassic) -> ArrayLike:
    """L = [(A_u u)^k + (A_s s)^k]^(1/k) with k = (delta-1)/delta"""
    _require_positive(n_s=n_s, n_u=n_u)
    k = _classic_exponent(p)
    s = np.asarray(n_s, dtype=float)
    u = np.asarray(n_u, dtype=float)
    inner = np.power(p.a_u * u, k) + np.power(p.a_s * s, k)
    return _scalar(np.power(inner, 1.0 / k))


def wages_classic(n_s: ArrayLike, n_u: ArrayLike, p: ModelParamsClassic) -> Tuple[ArrayLike, ArrayLike]:
    """Marginal-product wages w_j = A_j^k (L/n_j)^(1/delta)"""
    k = _classic_exponent(p)
    output = np.asarray(ces_output_classic(n_s, n_u, p))
    s = np.asarray(n_s, dtype=float)
    u = np.asarray(n_u, dtype=float)
    w_s = p.a_s ** k * np.power(output / s, 1.0 / p.delta)
    w_u = p.a_u ** k * np.power(output / u, 1.0 / p.delta)
    return _scalar(w_s), _scalar(w_u)


def skill_premium(n_s: ArrayLike, n_u: ArrayLike, p: ModelParamsClassic) -> ArrayLike:
    """w_s/w_u = (A_s/A_u)^k (s/u)^(-1/delta)"""
    _require_positive(n_s=n_s, n_u=n_u)
    k = _classic_exponent(p)
    ratio = np.asarray(n_s, dtype=float) / np.asarray(n_u, dtype=float)
    return _scalar((p.a_s / p.a_u) ** k * np.power(ratio, -1.0 / p.delta))


def average_wage(n_s: ArrayLike, n_u: ArrayLike, p: ModelParamsClassic) -> ArrayLike:
    """Hours-weighted average wage (u w_u + s w_s)/(u + s)"""
    w_s, w_u = wages_classic(n_s, n_u, p)
    s = np.asarray(n_s, dtype=float)
    u = np.asarray(n_u, dtype=float)
    return _scalar((u * np.asarray(w_u) + s * np.asarray(w_s)) / (u + s))


def average_wage_from_ratio(ratio: ArrayLike, p: ModelParamsClassic) -> ArrayLike:
    """Average wage as a function of relative factor intensity s/u only"""
    _require_positive(ratio=ratio)
    k = _classic_exponent(p)
    r = np.asarray(ratio, dtype=float)
    inner = p.a_u ** k + p.a_s ** k * np.power(r, k)
    return _scalar(np.power(inner, 1.0 / k) / (1.0 + r))


def equilibrium_classic(l_demand: float, p: ModelParamsClassic) -> EquilibriumState:
    """
    Labor market equilibrium at an exogenous level of legal-services demand

    Hours follow n_j = [gamma^(-delta) A_j^(delta-1) L]^(1/(1+delta rho_j)) and wages
    sit on the supply curve, w_j = gamma n_j^rho_j, so the state clears both markets.
    L is taken as given; L = L(n_s, n_u) is not imposed.
    """
    _require_positive(l_demand=l_demand)
    _classic_exponent(p)
    g, d = p.gamma_disutility, p.delta
    n_s = (g ** (-d) * p.a_s ** (d - 1.0) * l_demand) ** (1.0 / (1.0 + d * p.rho_s))
    n_u = (g ** (-d) * p.a_u ** (d - 1.0) * l_demand) ** (1.0 / (1.0 + d * p.rho_u))
    return EquilibriumState(
        n_s=n_s,
        n_u=n_u,
        w_s=g * n_s ** p.rho_s,
        w_u=g * n_u ** p.rho_u,
        l_demand=l_demand,
    )


def market_clearing_residual(state: EquilibriumState, p: ModelParamsClassic) -> float:
    """Largest gap between hours supplied at the equilibrium wages and equilibrium hours"""
    supplied_s = labor_supply(state.w_s, p.rho_s, p.gamma_disutility)
    supplied_u = labor_supply(state.w_u, p.rho_u, p.gamma_disutility)
    return max(abs(supplied_s - state.n_s), abs(supplied_u - state.n_u))


def composition_ratio(l_demand: float, p: ModelParamsClassic) -> float:
    """Skilled-to-unskilled hours ratio s*/u* at demand level L"""
    state = equilibrium_classic(l_demand, p)
    return state.n_s / state.n_u


# ---------------------------------------------------------------------------
# GMM technology
# ---------------------------------------------------------------------------

def _gmm_inner(n_s: ArrayLike, n_u: ArrayLike, p: ModelParamsGmm) -> np.ndarray:
    if p.zeta == 0.0:
        raise DomainError("Cobb-Douglas limit (zeta = 0) is not supported")
    _require_positive(n_s=n_s, n_u=n_u)
    s = np.asarray(n_s, dtype=float)
    u = np.asarray(n_u, dtype=float)
    return (1.0 - p.share_lambda) * np.power(u, p.zeta) + p.share_lambda * np.power(p.a_rel * s, p.zeta)


def ces_output_gmm(n_s: ArrayLike, n_u: ArrayLike, theta: ArrayLike, p: ModelParamsGmm) -> ArrayLike:
    """L = theta [(1-lambda) n_u^zeta + lambda (A n_s)^zeta]^(alpha/zeta)"""
    _require_positive(theta=theta)
    inner = _gmm_inner(n_s, n_u, p)
    return _scalar(np.asarray(theta, dtype=float) * np.power(inner, p.alpha / p.zeta))


def wages_gmm(n_s: ArrayLike, n_u: ArrayLike, theta: ArrayLike, p: ModelParamsGmm) -> Tuple[ArrayLike, ArrayLike]:
    """Marginal products of the GMM technology"""
    _require_positive(theta=theta)
    inner = _gmm_inner(n_s, n_u, p)
    s = np.asarray(n_s, dtype=float)
    u = np.asarray(n_u, dtype=float)
    common = p.alpha * np.asarray(theta, dtype=float) * np.power(inner, (p.alpha - p.zeta) / p.zeta)
    w_s = common * p.share_lambda * p.a_rel * np.power(p.a_rel * s, p.zeta - 1.0)
    w_u = common * (1.0 - p.share_lambda) * np.power(u, p.zeta - 1.0)
    return _scalar(w_s), _scalar(w_u)


def skill_share(n_s: ArrayLike, n_u: ArrayLike, p: ModelParamsGmm) -> ArrayLike:
    """CES cost share of skilled labor, lambda(A n_s)^zeta / inner"""
    inner = _gmm_inner(n_s, n_u, p)
    skilled = p.share_lambda * np.power(p.a_rel * np.asarray(n_s, dtype=float), p.zeta)
    return _scalar(skilled / inner)


def zeta_from_elasticity(subst_elasticity: float) -> float:
    """zeta = 1 - 1/delta"""
    _require_positive(subst_elasticity=subst_elasticity)
    return 1.0 - 1.0 / subst_elasticity


def elasticity_from_zeta(zeta: float) -> float:
    """delta = 1/(1 - zeta)"""
    if not zeta < 1.0:
        raise DomainError(f"zeta must be below 1, got {zeta}")
    return 1.0 / (1.0 - zeta)


def calibrate_gmm(mu_skill_share: float, wage_premium: float, subst_elasticity: float) -> Calibration:
    """
    Calibrate the production block from the skilled share, wage premium and elasticity

    Args:
        mu_skill_share: average share of skilled workers
        wage_premium: relative efficiency A, set to the skilled/unskilled wage ratio
        subst_elasticity: elasticity of substitution delta

    Returns:
        Calibration with zeta, share_lambda and the skill share pi at (mu, 1-mu)
    """
    if not 0.0 < mu_skill_share < 1.0:
        raise DomainError(f"mu_skill_share must lie in (0, 1), got {mu_skill_share}")
    _require_positive(wage_premium=wage_premium, subst_elasticity=subst_elasticity)
    if subst_elasticity == 1.0:
        raise DomainError("subst_elasticity = 1 implies zeta = 0 (Cobb-Douglas), not supported")

    zeta = zeta_from_elasticity(subst_elasticity)
    unskilled_term = (1.0 - mu_skill_share) ** (zeta - 1.0)
    skilled_term = (wage_premium * mu_skill_share) ** (zeta - 1.0)
    share_lambda = unskilled_term / (skilled_term + unskilled_term)

    skilled = share_lambda * (wage_premium * mu_skill_share) ** zeta
    pi_share = skilled / ((1.0 - share_lambda) * (1.0 - mu_skill_share) ** zeta + skilled)

    logger.debug(f"Calibrated zeta={zeta:.6f}, lambda={share_lambda:.6f}, pi={pi_share:.6f}")
    return Calibration(
        mu_skill_share=mu_skill_share,
        wage_premium=wage_premium,
        subst_elasticity=subst_elasticity,
        zeta=zeta,
        share_lambda=share_lambda,
        pi_share=pi_share,
    )


# ---------------------------------------------------------------------------
# demand for legal services
# ---------------------------------------------------------------------------

def demand_shock(br: ArrayLike, fs: ArrayLike, shock_scale: float) -> ArrayLike:
    """h(BR, f) = lambda (BR - FS); zero when every case is forum shopped"""
    _require_nonnegative(br=br, fs=fs)
    _require_positive(shock_scale=shock_scale)
    br_arr = np.asarray(br, dtype=float)
    fs_arr = np.asarray(fs, dtype=float)
    if np.any(fs_arr > br_arr):
        raise DomainError(f"forum-shopped count exceeds bankruptcies (fs={fs!r}, br={br!r})")
    return _scalar(shock_scale * (br_arr - fs_arr))


def total_demand(d: DemandParams, br: ArrayLike, fs: ArrayLike) -> ArrayLike:
    """L = L_bar_BR + h(BR, f) + L_other"""
    return _scalar(d.l_bar_br + np.asarray(demand_shock(br, fs, d.shock_scale)) + d.l_other)


def theta_level(d: DemandParams, br: ArrayLike) -> ArrayLike:
    """theta = L_bar_c + Phi BR"""
    _require_nonnegative(br=br)
    return _scalar(d.l_bar_county + d.phi_fees * np.asarray(br, dtype=float))


def delta_theta(d: DemandParams, br_t: ArrayLike, br_tm1: ArrayLike) -> ArrayLike:
    """Delta theta = Phi (BR_t - BR_{t-1}) / (L_bar_c + BR_t)"""
    _require_nonnegative(br_t=br_t, br_tm1=br_tm1)
    current = np.asarray(br_t, dtype=float)
    previous = np.asarray(br_tm1, dtype=float)
    return _scalar(d.phi_fees * (current - previous) / (d.l_bar_county + current))


def employment_response_to_bankruptcy(d: DemandParams, p: ModelParamsClassic, br: float,
                                      fs_share: float, step: float = 1e-5) -> Tuple[float, float]:
    """
    Finite-difference response of equilibrium hours to one more bankruptcy

    The forum-shopped share f = FS/BR is held fixed while BR moves, so demand
    responds at rate lambda(1 - f).

    Returns:
        (d n_s*/d BR, d n_u*/d BR)
    """
    if not 0.0 <= fs_share <= 1.0:
        raise DomainError(f"fs_share must lie in [0, 1], got {fs_share}")
    _require_nonnegative(br=br)

    def hours(level: float) -> Tuple[float, float]:
        state = equilibrium_classic(total_demand(d, level, fs_share * level), p)
        return state.n_s, state.n_u

    low = max(br - step, 0.0)
    high = br + step
    s_hi, u_hi = hours(high)
    s_lo, u_lo = hours(low)
    width = high - low
    return (s_hi - s_lo) / width, (u_hi - u_lo) / width


# ---------------------------------------------------------------------------
# log-difference dynamics
# ---------------------------------------------------------------------------

def _demand_coefficients(pi_share: float, p: ModelParamsGmm) -> np.ndarray:
    """2x2 map from (dn_s, dn_u) to the wage responses net of dtheta"""
    curvature = p.alpha - p.zeta
    return np.array([
        [(p.zeta - 1.0) + curvature * pi_share, curvature * (1.0 - pi_share)],
        [curvature * pi_share, (p.zeta - 1.0) + curvature * (1.0 - pi_share)],
    ])


def log_diff_demand(dn_s: ArrayLike, dn_u: ArrayLike, dtheta: ArrayLike, pi_share: float,
                    p: ModelParamsGmm) -> Tuple[ArrayLike, ArrayLike]:
    """Wage log-changes implied by marginal-product pricing"""
    if not 0.0 < pi_share < 1.0:
        raise DomainError(f"pi_share must lie in (0, 1), got {pi_share}")
    coef = _demand_coefficients(pi_share, p)
    s = np.asarray(dn_s, dtype=float)
    u = np.asarray(dn_u, dtype=float)
    shift = np.asarray(dtheta, dtype=float)
    dw_s = shift + coef[0, 0] * s + coef[0, 1] * u
    dw_u = shift + coef[1, 0] * s + coef[1, 1] * u
    return _scalar(dw_s), _scalar(dw_u)


def log_diff_supply(dw_s: ArrayLike, dw_u: ArrayLike, p: ModelParamsGmm) -> Tuple[ArrayLike, ArrayLike]:
    """Hours log-changes on the supply curves, dn_j = dw_j / rho_j"""
    return (_scalar(np.asarray(dw_s, dtype=float) / p.rho_s),
            _scalar(np.asarray(dw_u, dtype=float) / p.rho_u))


def solve_log_diff_system(dtheta: ArrayLike, pi_share: float, p: ModelParamsGmm,
                          errors: Optional[np.ndarray] = None) -> Tuple[ArrayLike, ArrayLike, ArrayLike, ArrayLike]:
    """
    Jointly solve the four log-difference equations for one or many demand shifts

    Args:
        dtheta: demand shift(s)
        pi_share: skill share evaluated at the anchor
        p: GMM parameters
        errors: optional (..., 4) structural errors in the order (wS, wU, nS, nU);
            the solution reproduces them exactly as equation residuals

    Returns:
        (dw_s, dw_u, dn_s, dn_u)
    """
    if not 0.0 < pi_share < 1.0:
        raise DomainError(f"pi_share must lie in (0, 1), got {pi_share}")
    shift = np.asarray(dtheta, dtype=float)
    if errors is None:
        eps = np.zeros(shift.shape + (4,))
    else:
        eps = np.broadcast_to(np.asarray(errors, dtype=float), shift.shape + (4,))

    coef = _demand_coefficients(pi_share, p)
    supply = np.diag([1.0 / p.rho_s, 1.0 / p.rho_u])
    system = np.eye(2) - coef @ supply
    if abs(np.linalg.det(system)) < 1e-14:
        raise DomainError("log-difference system is singular at these parameters")

    e_w = eps[..., :2]
    e_n = eps[..., 2:]
    rhs = shift[..., None] + e_w + e_n @ coef.T
    dw = np.linalg.solve(system, rhs.reshape(-1, 2).T).T.reshape(rhs.shape)
    dn = dw @ supply.T + e_n
    return _scalar(dw[..., 0]), _scalar(dw[..., 1]), _scalar(dn[..., 0]), _scalar(dn[..., 1])


def equilibrium_response(pi_share: float, p: ModelParamsGmm) -> np.ndarray:
    """Multipliers of a unit demand shift on (dw_s, dw_u, dn_s, dn_u)"""
    return np.array(solve_log_diff_system(1.0, pi_share, p), dtype=float)

