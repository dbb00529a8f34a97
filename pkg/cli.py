#!/usr/bin/env python3
"""
Legal Markets Lab Command Line
One pipeline stage per command; stages communicate through files in the output directory
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd

from config import RunConfig, configure_logging, dump_run_config, load_run_config, settings
from exceptions import ConfigError, LegalMarketsError
from fe_regress import estimate_delta, ols_fe, placebo_lags
from gmm_estimator import estimate
from model_core import equilibrium_response
from monte_carlo import gmm_recovery, reduced_form_recovery
from panel_synth import read_panel, simulate_panel, write_panel
from report import build_report
from welfare import ev_table, gains_lost

logger = logging.getLogger(__name__)

EXIT_CODES = {
    "config": 2,
    "panel": 3,
    "domain": 3,
    "convergence": 4,
    "rank": 4,
    "estimation": 4,
}
COMMANDS = ["simulate", "calibrate", "regress", "gmm", "welfare", "gains", "report", "montecarlo"]


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text.rstrip() + "\n", encoding="utf-8")
    return path


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path


def _panel_path(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> Path:
    if args.panel:
        return Path(args.panel)
    candidate = Path(config.io.panel)
    return candidate if candidate.is_absolute() else out_dir / candidate


def cmd_simulate(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    """Simulate a panel under [simulate] and write it"""
    panel = simulate_panel(config.simulate, config.model.gmm_params(), config.demand, config.model.mu_skill_share)
    target = Path(config.io.panel)
    target = target if target.is_absolute() else out_dir / target
    print(f"Simulated {len(panel)} county-years ({config.simulate.dgp_kind}) -> {target}")
    return [write_panel(panel, target)]


def cmd_calibrate(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    """Calibrate (zeta, lambda, pi) from (mu, wage premium, delta)"""
    calib = config.model.calibration()
    params = config.model.gmm_params()
    multipliers = equilibrium_response(calib.pi_share, params)
    lines = [
        f"mu_skill_share = {calib.mu_skill_share:.4f}",
        f"wage_premium = {calib.wage_premium:.4f}",
        f"subst_elasticity = {calib.subst_elasticity:.4f}",
        f"zeta = {calib.zeta:.6f}",
        f"share_lambda = {calib.share_lambda:.6f}",
        f"pi_share = {calib.pi_share:.6f} ({calib.pi_share:.2f})",
        "response to a unit demand shift (dw_s, dw_u, dn_s, dn_u) = "
        + ", ".join(f"{m:.6f}" for m in multipliers),
    ]
    text = "\n".join(lines)
    print(text)
    return [_write_text(out_dir / "calibration.txt", text)]


def cmd_regress(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    """Baseline employment regression, placebo lags and the delta back-out"""
    panel = read_panel(_panel_path(config, args, out_dir))
    section = config.regress
    main = ols_fe(panel, section.spec())
    blocks = [main.summary()]
    placebo_rows = []
    for spec in section.placebo_specs():
        fit = placebo_lags(panel, spec)
        blocks.append(fit.summary())
        table = fit.to_frame()
        table.insert(0, "lags", ",".join(map(str, spec.lags)))
        placebo_rows.append(table)
    if section.estimate_delta:
        blocks.append(estimate_delta(panel).summary())

    text = "\n\n".join(blocks)
    print(text)
    outputs = [_write_text(out_dir / "regression.txt", text), _write_csv(main.to_frame(), out_dir / config.io.coefficients)]
    if placebo_rows:
        outputs.append(_write_csv(pd.concat(placebo_rows, ignore_index=True), out_dir / "placebo.csv"))
    return outputs


def cmd_gmm(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    """Two-step clustered GMM on the panel"""
    panel = read_panel(_panel_path(config, args, out_dir))
    spec = config.gmm.spec(config.model.calibration())
    result = estimate(panel, config.demand, spec, config.gmm.detrend_controls, config.gmm.detrend_absorb,
                      numeric_check=config.gmm.numeric_check)
    text = result.summary()
    print(text)
    return [_write_text(out_dir / "gmm.txt", text), _write_csv(result.to_frame(), out_dir / "gmm_estimates.csv")]


def cmd_welfare(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    """Consumption equivalent variation of the no-forum-shopping counterfactual"""
    panel = read_panel(_panel_path(config, args, out_dir))
    section = config.welfare
    if section.horizon is not None:
        panel = panel[panel["year"] <= panel["year"].min() + section.horizon]
    table = ev_table(panel, config.model.gmm_params(), config.demand, section.sigmas, section.weighting,
                     config.model.mu_skill_share, section.wage_unskilled_0)
    text = table.render()
    print(text)
    return [
        _write_text(out_dir / "welfare.txt", text),
        _write_csv(table.per_county[["sigma", "county_id", "ev_skilled", "ev_unskilled"]], out_dir / "ev_by_county.csv"),
        _write_csv(table.summary, out_dir / "ev_summary.csv"),
    ]


def cmd_gains(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    """Jobs lost to forum shopping from the estimated coefficients"""
    panel = read_panel(_panel_path(config, args, out_dir))
    source = Path(args.coefficients) if args.coefficients else out_dir / config.io.coefficients
    if not source.exists():
        raise ConfigError(f"coefficient table not found: {source} (run regress first)")
    table = pd.read_csv(source)
    result = gains_lost(dict(zip(table["term"], table["estimate"].astype(float))), panel)
    text = result.render()
    print(text)
    return [_write_text(out_dir / "gains.txt", text), _write_csv(result.by_year, out_dir / "gains_by_year.csv")]


def cmd_report(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    """Bundle every stage's text output (and charts) into one report"""
    run_dir = Path(args.run_dir) if args.run_dir else out_dir
    target = build_report(run_dir, plots=config.io.plots or settings.plots_enabled)
    print(target.read_text(encoding="utf-8"))
    return [target]


def cmd_montecarlo(config: RunConfig, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    """Replicated parameter-recovery experiment"""
    section = config.montecarlo
    if section.experiment == "reduced_form":
        cfg = config.simulate.model_copy(update={"dgp_kind": "reduced_form"})
        summary = reduced_form_recovery(cfg, config.regress.spec(), section.replications, section.workers)
    else:
        cfg = config.simulate.model_copy(update={"dgp_kind": "structural"})
        spec = config.gmm.spec(config.model.calibration())
        summary = gmm_recovery(cfg, config.model.gmm_params(), config.demand, spec, section.replications,
                               section.workers, config.model.mu_skill_share)
    text = summary.render()
    print(text)
    return [_write_text(out_dir / "montecarlo.txt", text),
            _write_csv(summary.estimates, out_dir / "montecarlo_estimates.csv")]


HANDLERS: Dict[str, Callable[[RunConfig, argparse.Namespace, Path], List[Path]]] = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "regress": cmd_regress,
    "gmm": cmd_gmm,
    "welfare": cmd_welfare,
    "gains": cmd_gains,
    "report": cmd_report,
    "montecarlo": cmd_montecarlo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Legal services labor market laboratory')
    parser.add_argument('command', choices=COMMANDS, help='Pipeline stage to run')
    parser.add_argument('--config', help='Run configuration file ([section] / key = value)')
    parser.add_argument('--seed', type=int, help='Seed overriding [io] seed')
    parser.add_argument('--out', help='Output directory (default: LEGALMKT_OUTPUT_DIR or runs)')
    parser.add_argument('--panel', help='Input panel file for regress, gmm, welfare and gains')
    parser.add_argument('--coefficients', help='Coefficient table for gains')
    parser.add_argument('--run-dir', help='Run directory to summarize for report')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        config = load_run_config(args.config).with_seed(args.seed)
        out_dir = Path(args.out or settings.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_text(out_dir / f"{args.command}.config.ini", dump_run_config(config))
        outputs = HANDLERS[args.command](config, args, out_dir)
        logger.info(f"{args.command} finished; wrote {', '.join(p.name for p in outputs)}")
        return 0
    except LegalMarketsError as e:
        message = " ".join(str(e).split())
        print(f"error[{e.category}]: {message}", file=sys.stderr)
        return EXIT_CODES.get(e.category, 1)
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}")
        print(f"error[internal]: {' '.join(str(e).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
