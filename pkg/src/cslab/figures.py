"""Figure rendering for run reports.

Everything reads the delimited outputs a matrix run leaves behind and
writes PNGs next to them, so plots can be regenerated without retraining.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["figure.figsize"] = (7.0, 4.2)
plt.rcParams["font.size"] = 9
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3
plt.rcParams["savefig.dpi"] = 130

EXPERT_COLORS = {"man": "tab:blue", "eng": "tab:orange"}


def _read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def render_score_figure(run_dir, out_path=None):
    """Grouped bars: beam MER per system for both dev splits."""
    run_dir = Path(run_dir)
    rows = [r for r in _read_csv(run_dir / "score_report.csv")
            if r["decoder"] == "beam10"]
    systems = sorted({r["system"] for r in rows})
    splits = sorted({r["split"] for r in rows})
    fig, ax = plt.subplots()
    width = 0.8 / max(len(splits), 1)
    for si, split in enumerate(splits):
        vals = []
        for system in systems:
            match = [r for r in rows if r["system"] == system and r["split"] == split]
            vals.append(float(match[0]["mer"]) * 100 if match else 0.0)
        xs = [i + si * width for i in range(len(systems))]
        ax.bar(xs, vals, width=width, label=split)
    ax.set_xticks([i + width * (len(splits) - 1) / 2 for i in range(len(systems))])
    ax.set_xticklabels(systems, rotation=20, ha="right")
    ax.set_ylabel("MER (%)")
    ax.set_title("Mixed error rate by system (beam 10)")
    ax.legend()
    return _save(fig, out_path or run_dir / "score_comparison.png")


def render_gating_figure(run_dir, out_path=None):
    """Mean gate weight for the A expert over true-A vs true-B frames."""
    run_dir = Path(run_dir)
    rows = _read_csv(run_dir / "gating_report.csv")
    labels = [f"{r['system']}\n{r['split']}" for r in rows]
    on_a = [float(r["mean_gate_a_on_true_a"]) for r in rows]
    on_b = [float(r["mean_gate_a_on_true_b"]) for r in rows]
    fig, ax = plt.subplots()
    xs = range(len(rows))
    ax.bar([x - 0.18 for x in xs], on_a, width=0.36, label="true-A frames")
    ax.bar([x + 0.18 for x in xs], on_b, width=0.36, label="true-B frames")
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_ylabel("mean gate weight (A expert)")
    ax.set_ylim(0, 1)
    ax.set_title("Gating weights by true frame language")
    ax.legend()
    return _save(fig, out_path or run_dir / "gating_weights.png")


def render_projection_figure(points_csv, out_path=None):
    """Scatter of the 2-D expert-embedding projection, colored by expert."""
    points_csv = Path(points_csv)
    rows = _read_csv(points_csv)
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    for expert in ("man", "eng"):
        xs = [float(r["x"]) for r in rows if r["expert"] == expert]
        ys = [float(r["y"]) for r in rows if r["expert"] == expert]
        ax.scatter(xs, ys, s=3, alpha=0.35, lw=0,
                   color=EXPERT_COLORS[expert], label=f"{expert} expert")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(points_csv.parent.name or "expert embeddings")
    ax.legend(markerscale=4)
    return _save(fig, out_path or points_csv.with_suffix(".png"))


def render_training_curves(run_dir, out_path=None):
    """Total-loss curves per system from the step logs."""
    run_dir = Path(run_dir)
    fig, ax = plt.subplots()
    for log in sorted(run_dir.glob("*/train_log.tsv")):
        steps, totals = [], []
        with open(log, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            col = header.index("l_total")
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                steps.append(int(parts[0]))
                totals.append(float(parts[col]))
        ax.plot(steps, totals, label=log.parent.name, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_title("Training objective per system")
    ax.legend()
    return _save(fig, out_path or run_dir / "training_curves.png")


def render_run_report(run_dir) -> list[Path]:
    """All figures a finished matrix run supports; returns written paths."""
    run_dir = Path(run_dir)
    written = []
    if (run_dir / "score_report.csv").exists():
        written.append(render_score_figure(run_dir))
    if (run_dir / "gating_report.csv").exists():
        rows = _read_csv(run_dir / "gating_report.csv")
        if rows:
            written.append(render_gating_figure(run_dir))
    for pts in sorted(run_dir.glob("*/projection_points.csv")):
        written.append(render_projection_figure(pts))
    if any(run_dir.glob("*/train_log.tsv")):
        written.append(render_training_curves(run_dir))
    return written
