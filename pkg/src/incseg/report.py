"""Delimited metric output and summary figures.

metrics.csv holds one row per (step, class); summary.csv the Old/New/All
aggregates per step. The figure renderer writes a vector-graphics line plot
next to the CSVs. recompute_summary re-derives the aggregates from the
per-class rows so reports can be cross-checked independently.
"""

from __future__ import annotations

import csv
from pathlib import Path
from statistics import fmean

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

METRICS_HEADER = ("step", "class", "dsc", "method")
SUMMARY_HEADER = ("step", "method", "old", "new", "all")


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for step, class_id, score, method in rows:
            writer.writerow([step, class_id, repr(float(score)), method])


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        for step, class_id, score, method in reader:
            rows.append((int(step), int(class_id), float(score), method))
    return rows


def write_summary_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for step, method, old, new, all_ in rows:
            writer.writerow([step, method, repr(float(old)),
                             "" if new is None else repr(float(new)),
                             repr(float(all_))])


def read_summary_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SUMMARY_HEADER:
            raise ValueError(f"{path}: unexpected summary header {header}")
        for step, method, old, new, all_ in reader:
            rows.append((int(step), method, float(old),
                         None if new == "" else float(new), float(all_)))
    return rows


def recompute_summary(metrics_rows, initial_classes):
    """Old/New/All per (step, method), re-derived from per-class rows."""
    initial = set(initial_classes)
    grouped: dict = {}
    for step, class_id, score, method in metrics_rows:
        grouped.setdefault((step, method), {})[class_id] = score
    out = []
    for (step, method), per_class in sorted(grouped.items(), key=lambda kv: kv[0]):
        old = fmean(v for c, v in sorted(per_class.items()) if c in initial)
        incr = [v for c, v in sorted(per_class.items()) if c not in initial]
        new = fmean(incr) if incr else None
        all_ = fmean(v for _, v in sorted(per_class.items()))
        out.append((step, method, old, new, all_))
    return out


def render_summary_figure(summary_rows, path) -> None:
    """Old/New/All trajectories across steps, one panel per run."""
    methods = sorted({row[1] for row in summary_rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in methods:
        rows = sorted(r for r in summary_rows if r[1] == method)
        steps = [r[0] for r in rows]
        for idx, label, style in ((2, "old", "o-"), (3, "new", "s--"), (4, "all", "^-")):
            series = [(s, r[idx]) for s, r in zip(steps, rows) if r[idx] is not None]
            if not series:
                continue
            suffix = f" ({method})" if len(methods) > 1 else ""
            ax.plot([s for s, _ in series], [v for _, v in series], style,
                    label=label + suffix)
    ax.set_xlabel("incremental step")
    ax.set_ylabel("mean DSC")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(sorted({r[0] for r in summary_rows}))
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
