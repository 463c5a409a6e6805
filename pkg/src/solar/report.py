"""SVG rendering of training curves and metric tables for a run directory."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402

STAGE1_CURVES = ("total", "itc", "gla", "gd", "ld")


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_losses(records: list[dict], keys, title: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in records]
    for k in keys:
        if k in records[0]:
            ax.plot(steps, [r[k] for r in records], label=k, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_table(reports: dict[str, MetricsReport], path) -> Path:
    cols = ["R@1", "R@5", "R@10", "mR", "Prec.", "Avg."]
    rows = [
        [f"{v:.2f}" for v in (r.recall_at_1, r.recall_at_5, r.recall_at_10, r.mR, r.precision, r.avg)]
        for r in reports.values()
    ]
    fig, ax = plt.subplots(figsize=(7, 0.6 + 0.4 * len(rows)))
    ax.axis("off")
    ax.table(cellText=rows, rowLabels=list(reports), colLabels=cols, loc="center")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def render_run(run_dir: Path) -> list[Path]:
    """Write ``stage*_losses.svg`` and ``metrics.svg`` for whatever the run holds."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"no run directory at {run_dir}")
    written = []
    s1 = run_dir / "stage1_log.jsonl"
    if s1.exists() and s1.stat().st_size:
        written.append(plot_losses(read_log(s1), STAGE1_CURVES, "Stage 1", run_dir / "stage1_losses.svg"))
    s2 = run_dir / "stage2_log.jsonl"
    if s2.exists() and s2.stat().st_size:
        written.append(plot_losses(read_log(s2), ("loss",), "Stage 2", run_dir / "stage2_losses.svg"))
    reports = {
        p.stem[len("report_"):]: MetricsReport(**json.loads(p.read_text()))
        for p in sorted(run_dir.glob("report_*.json"))
    }
    if reports:
        written.append(plot_table(reports, run_dir / "metrics.svg"))
        (run_dir / "metrics.txt").write_text(
            "\n\n".join(r.to_table(name) for name, r in reports.items()) + "\n"
        )
    return written
