"""
Monte Carlo Recovery Experiments
Replicated simulate-and-estimate loops for the reduced-form regression and the two-step GMM
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from exceptions import EstimationError, LegalMarketsError
from fe_regress import RegressionSpec, ols_fe, placebo_lags
from gmm_estimator import PARAM_NAMES, GmmSpec, estimate
from model_core import DemandParams, ModelParamsGmm
from panel_synth import SynthConfig, simulate_reduced_form_panel, simulate_structural_panel

logger = logging.getLogger(__name__)

CRITICAL_95 = float(norm.ppf(0.975))


@dataclass
class RecoverySummary:
    """Per-replication estimates and their aggregate performance"""

    experiment: str
    truth: Dict[str, float]
    estimates: pd.DataFrame
    mean_estimate: Dict[str, float]
    coverage_95: Dict[str, float]
    rejection_rates: Dict[str, float]
    failures: int = 0

    @property
    def replications(self) -> int:
        return len(self.estimates)

    def render(self) -> str:
        lines = [f"{self.experiment} recovery over {self.replications} replications",
                 f"{'parameter':<16}{'truth':>12}{'mean':>12}{'coverage':>10}"]
        for name, truth in self.truth.items():
            lines.append(f"{name:<16}{truth:>12.5f}{self.mean_estimate[name]:>12.5f}{self.coverage_95[name]:>10.3f}")
        for name, rate in self.rejection_rates.items():
            lines.append(f"rejection rate at 5%, {name}: {rate:.3f}")
        if self.failures:
            lines.append(f"failed replications (excluded above): {self.failures}")
        return "\n".join(lines)


def _replicate(run: Callable[[int], Dict[str, float]], seeds: Sequence[int], workers: int) -> List[Dict[str, float]]:
    if workers <= 1:
        return [run(seed) for seed in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, seeds))


def _failed_row(seed: int, names: Sequence[str], error: LegalMarketsError) -> Dict[str, float]:
    logger.warning(f"Replication with seed {seed} failed ({error.category}): {error}")
    row: Dict[str, float] = {"seed": seed, "failed": 1.0}
    for name in names:
        row[name] = float("nan")
    return row


def _summarize(experiment: str, truth: Dict[str, float], rows: List[Dict[str, float]],
               rejection_columns: Sequence[str]) -> RecoverySummary:
    estimates = pd.DataFrame(rows)
    ok = estimates[estimates["failed"] == 0]
    failures = int(len(estimates) - len(ok))
    if ok.empty:
        raise EstimationError(f"all {len(estimates)} {experiment} replications failed")
    mean_estimate = {name: float(ok[name].mean()) for name in truth}
    coverage = {}
    for name, value in truth.items():
        half_width = CRITICAL_95 * ok[f"{name}_se"]
        coverage[name] = float(((ok[name] - value).abs() <= half_width).mean())
    rejection = {column: float(ok[column].mean()) for column in rejection_columns}
    summary = RecoverySummary(experiment, truth, estimates, mean_estimate, coverage, rejection, failures)
    logger.info(f"{experiment} Monte Carlo finished: {summary.replications} replications, {failures} failed")
    return summary


def reduced_form_replication(seed: int, cfg: SynthConfig, spec: RegressionSpec,
                             placebo_lag: int = 1) -> Dict[str, float]:
    """
    One reduced-form draw: treatment estimates, their SEs and the placebo-lag rejection

    The placebo regression lags the bankruptcy count only and rejects when its
    lag is significant at 5%.
    """
    names = [col for t in spec.treatments for col in (t, f"{t}_se")]
    if placebo_lag > 0:
        names.append("placebo_reject")
    try:
        panel = simulate_reduced_form_panel(cfg.model_copy(update={"rng_seed": seed}))
        fit = ols_fe(panel, spec)
        row: Dict[str, float] = {"seed": seed, "failed": 0.0}
        for name in spec.treatments:
            row[name] = fit.coefficients[name]
            row[f"{name}_se"] = fit.std_errors[name]
        if placebo_lag > 0:
            bankruptcies = spec.treatments[0]
            placebo = placebo_lags(panel, spec.model_copy(update={"lags": (placebo_lag,), "lincoms": ()}),
                                   lagged=(bankruptcies,))
            lag_name = f"{bankruptcies}_lag{placebo_lag}"
            row["placebo_reject"] = float(abs(placebo.coefficients[lag_name])
                                          > CRITICAL_95 * placebo.std_errors[lag_name])
        return row
    except LegalMarketsError as e:
        return _failed_row(seed, names, e)


def reduced_form_recovery(cfg: SynthConfig, spec: RegressionSpec, replications: int, workers: int = 1,
                          placebo_lag: int = 1) -> RecoverySummary:
    """
    Repeat the reduced-form simulation at seeds rng_seed + rep and summarize recovery

    Truths are cfg.true_gamma_br / true_gamma_fs for n_br / n_fs.
    """
    truth = {"n_br": cfg.true_gamma_br, "n_fs": cfg.true_gamma_fs}
    truth = {name: value for name, value in truth.items() if name in spec.treatments}
    seeds = [cfg.rng_seed + rep for rep in range(replications)]
    run = partial(reduced_form_replication, cfg=cfg, spec=spec, placebo_lag=placebo_lag)
    rows = _replicate(run, seeds, workers)
    return _summarize("reduced_form", truth, rows, ["placebo_reject"] if placebo_lag > 0 else [])


def gmm_replication(seed: int, cfg: SynthConfig, p: ModelParamsGmm, d: DemandParams, spec: GmmSpec,
                    mu_skill_share: float = 0.42) -> Dict[str, float]:
    """One structural draw estimated by two-step GMM; a failed fit yields a NaN row flagged failed"""
    names = [col for name in PARAM_NAMES for col in (name, f"{name}_se")] + ["j_pvalue", "j_reject"]
    try:
        panel = simulate_structural_panel(cfg.model_copy(update={"rng_seed": seed}), p, d, mu_skill_share)
        result = estimate(panel, d, spec, numeric_check=False)
    except LegalMarketsError as e:
        return _failed_row(seed, names, e)
    row: Dict[str, float] = {"seed": seed, "failed": 0.0}
    for name, value, se in zip(PARAM_NAMES, result.beta_hat, result.std_errors):
        row[name] = float(value)
        row[f"{name}_se"] = float(se)
    row["j_pvalue"] = result.j_pvalue
    row["j_reject"] = float(result.j_pvalue < 0.05)
    return row


def gmm_recovery(cfg: SynthConfig, p: ModelParamsGmm, d: DemandParams, spec: GmmSpec, replications: int,
                 workers: int = 1, mu_skill_share: float = 0.42) -> RecoverySummary:
    """Repeat the structural simulation and two-step GMM; truths are (1/rho_s, 1/rho_u, alpha) of p"""
    truth = dict(zip(PARAM_NAMES, (1.0 / p.rho_s, 1.0 / p.rho_u, p.alpha)))
    seeds = [cfg.rng_seed + rep for rep in range(replications)]
    run = partial(gmm_replication, cfg=cfg, p=p, d=d, spec=spec, mu_skill_share=mu_skill_share)
    rows = _replicate(run, seeds, workers)
    summary = _summarize("gmm", truth, rows, ["j_reject"])
    ok = summary.estimates[summary.estimates["failed"] == 0]
    within = {name: float(np.mean(np.abs(ok[name] - truth[name]) <= 3.0 * ok[f"{name}_se"])) for name in truth}
    summary.rejection_rates.update({f"outside 3 SE ({name})": 1.0 - share for name, share in within.items()})
    return summary
