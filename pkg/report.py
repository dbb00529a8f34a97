"""
Run Report
Collects the text outputs of a pipeline run into one bundle, with optional SVG charts
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import pandas as pd

logger = logging.getLogger(__name__)

SECTIONS = [
    ("Calibration", "calibration.txt"),
    ("Employment regressions", "regression.txt"),
    ("GMM estimates", "gmm.txt"),
    ("Consumption equivalent variation", "welfare.txt"),
    ("Potential employment gains lost", "gains.txt"),
    ("Monte Carlo", "montecarlo.txt"),
]
SVG_HASH_SALT = "legal-markets-lab"


def _svg_figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def ev_chart(summary: pd.DataFrame, target: Path) -> Path:
    """Bar chart of average EV (%) by curvature regime and worker type"""
    plt = _svg_figure()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    positions = range(len(summary))
    width = 0.38
    ax.bar([x - width / 2 for x in positions], 100 * summary["ev_skilled"], width, label="skilled")
    ax.bar([x + width / 2 for x in positions], 100 * summary["ev_unskilled"], width, label="unskilled")
    ax.set_xticks(list(positions))
    ax.set_xticklabels([f"sigma = {s:g}" for s in summary["sigma"]])
    ax.set_ylabel("EV (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(target, format="svg", metadata={"Date": None})
    plt.close(fig)
    return target


def gains_chart(by_year: pd.DataFrame, target: Path) -> Path:
    """Line chart of jobs lost per year"""
    plt = _svg_figure()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(by_year["year"], by_year["jobs_lost"], marker="o", label="jobs lost")
    ax.plot(by_year["year"], by_year["potential_jobs"], marker="s", label="potential gains")
    ax.set_xlabel("year")
    ax.set_ylabel("jobs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(target, format="svg", metadata={"Date": None})
    plt.close(fig)
    return target


def build_report(run_dir: Union[str, Path], plots: bool = False, target: Optional[Union[str, Path]] = None) -> Path:
    """
    Concatenate the text outputs found in run_dir into report.txt

    Missing stages are listed as not run. Charts are drawn only when plots is
    set and the source tables exist.
    """
    base = Path(run_dir)
    parts: List[str] = []
    for title, name in SECTIONS:
        source = base / name
        parts.append(f"== {title} ==")
        parts.append(source.read_text(encoding="utf-8").rstrip() if source.exists() else "(not run)")
        parts.append("")

    if plots:
        charts = []
        if (base / "ev_summary.csv").exists():
            charts.append(ev_chart(pd.read_csv(base / "ev_summary.csv"), base / "ev_chart.svg"))
        if (base / "gains_by_year.csv").exists():
            charts.append(gains_chart(pd.read_csv(base / "gains_by_year.csv"), base / "gains_chart.svg"))
        parts.append("== Charts ==")
        if charts:
            parts.extend(chart.name for chart in charts)
        else:
            parts.append("(no chart sources)")
        parts.append("")

    output = Path(target) if target else base / "report.txt"
    output.write_text("\n".join(parts), encoding="utf-8")
    logger.info(f"Report written to {output}")
    return output
