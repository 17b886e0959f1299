"""Report rendering: aligned text tables, JSON-lines, and figures.

Every experiment run writes three artifacts side by side: a human-readable
table, one JSON object per row for machines, and PNG figures of the same
numbers.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .harness import ExperimentReport, ScalingReport


def _fmt(value: float | None, places: int = 4) -> str:
    return "-" if value is None else f"{value:.{places}f}"


def render_experiment_table(report: ExperimentReport) -> str:
    lines = [
        f"mode: {report.mode}   windows: {report.total_windows}   "
        f"alarms: {report.total_alarms}",
        "ground truth is window-level: a window is ATTACK if any flow is",
        "",
        f"{'fold':>4}  {'train':>6}  {'test':>5}  {'precision':>9}  "
        f"{'recall':>7}  {'time_s':>7}",
    ]
    for fold in report.folds:
        lines.append(
            f"{fold.fold:>4}  {fold.n_train:>6}  {fold.n_test_windows:>5}  "
            f"{_fmt(fold.metrics.precision):>9}  {_fmt(fold.metrics.recall):>7}  "
            f"{fold.wall_time_s:>7.3f}"
        )
    lines.append(
        f"{'mean':>4}  {'':>6}  {'':>5}  {_fmt(report.mean_precision):>9}  "
        f"{_fmt(report.mean_recall):>7}"
    )
    times = report.component_times
    if times.pretreat_s or times.computing_s or times.detection_s:
        # per-component breakdown exists only for in-process transport
        lines.append("")
        lines.append(
            f"component time (s): pretreat {times.pretreat_s:.3f}  "
            f"computing {times.computing_s:.3f}  detection {times.detection_s:.3f}"
        )
    return "\n".join(lines) + "\n"


def experiment_jsonl(report: ExperimentReport) -> str:
    lines = []
    for fold in report.folds:
        lines.append(
            json.dumps(
                {
                    "row": "fold",
                    "fold": fold.fold,
                    "n_train": fold.n_train,
                    "n_test_windows": fold.n_test_windows,
                    "precision": fold.metrics.precision,
                    "recall": fold.metrics.recall,
                    "tp": fold.metrics.true_positives,
                    "fp": fold.metrics.false_positives,
                    "fn": fold.metrics.false_negatives,
                    "tn": fold.metrics.true_negatives,
                    "wall_time_s": fold.wall_time_s,
                    "stages": [
                        {
                            "stage": s.stage,
                            "precision": s.precision,
                            "recall": s.recall,
                            "attack_windows": s.attack_windows,
                        }
                        for s in fold.metrics.stage_metrics
                    ],
                }
            )
        )
    lines.append(
        json.dumps(
            {
                "row": "summary",
                "mode": report.mode,
                "mean_precision": report.mean_precision,
                "mean_recall": report.mean_recall,
                "total_windows": report.total_windows,
                "total_alarms": report.total_alarms,
                "pretreat_s": report.component_times.pretreat_s,
                "computing_s": report.component_times.computing_s,
                "detection_s": report.component_times.detection_s,
            }
        )
    )
    return "\n".join(lines) + "\n"


def render_scaling_table(report: ScalingReport) -> str:
    lines = [
        f"{'domains':>7}  {'windows':>7}  {'time_s':>8}",
    ]
    for row in report.rows:
        lines.append(f"{row.domains:>7}  {row.windows:>7}  {row.wall_time_s:>8.3f}")
    lines.append("")
    lines.append(
        f"linear fit: time = {report.slope_s_per_domain:.4f} * domains "
        f"+ {report.intercept_s:.4f}   R^2 = {report.r_squared:.4f}"
    )
    return "\n".join(lines) + "\n"


def scaling_jsonl(report: ScalingReport) -> str:
    lines = [
        json.dumps(
            {
                "row": "scaling",
                "domains": r.domains,
                "windows": r.windows,
                "wall_time_s": r.wall_time_s,
            }
        )
        for r in report.rows
    ]
    lines.append(
        json.dumps(
            {
                "row": "fit",
                "slope_s_per_domain": report.slope_s_per_domain,
                "intercept_s": report.intercept_s,
                "r_squared": report.r_squared,
            }
        )
    )
    return "\n".join(lines) + "\n"


def plot_experiment(report: ExperimentReport, path: Path) -> None:
    """Per-fold precision and recall, one marker per fold."""
    folds = [f.fold for f in report.folds]
    precision = [f.metrics.precision for f in report.folds]
    recall = [f.metrics.recall for f in report.folds]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(folds, precision, marker="o", label="precision")
    ax.plot(folds, recall, marker="s", label="recall")
    ax.set_xlabel("fold")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(folds)
    ax.grid(True, alpha=0.3)
    ax.legend()
    ax.set_title(f"per-fold detection quality ({report.mode})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_scaling(report: ScalingReport, path: Path) -> None:
    """Wall time against domain count with the fitted line."""
    xs = [r.domains for r in report.rows]
    ys = [r.wall_time_s for r in report.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o", linestyle="", label="measured")
    fit = [report.slope_s_per_domain * x + report.intercept_s for x in xs]
    ax.plot(xs, fit, linestyle="--",
            label=f"fit (R$^2$={report.r_squared:.3f})")
    ax.set_xlabel("domains")
    ax.set_ylabel("wall time (s)")
    ax.set_xticks(xs)
    ax.grid(True, alpha=0.3)
    ax.legend()
    ax.set_title("pipeline time vs participating domains")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_experiment_report(report: ExperimentReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    table = out_dir / "report.txt"
    table.write_text(render_experiment_table(report))
    written.append(table)
    jsonl = out_dir / "report.jsonl"
    jsonl.write_text(experiment_jsonl(report))
    written.append(jsonl)
    figure = out_dir / "fold_metrics.png"
    plot_experiment(report, figure)
    written.append(figure)
    return written


def write_scaling_report(report: ScalingReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    table = out_dir / "scaling.txt"
    table.write_text(render_scaling_table(report))
    written.append(table)
    jsonl = out_dir / "scaling.jsonl"
    jsonl.write_text(scaling_jsonl(report))
    written.append(jsonl)
    figure = out_dir / "scaling.png"
    plot_scaling(report, figure)
    written.append(figure)
    return written
