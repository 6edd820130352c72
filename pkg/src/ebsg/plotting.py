"""File-rendered figures for the operator commands.

Every report-writing command renders a figure next to its delimited
output.  The Agg backend keeps rendering headless, and the PNG metadata
is pinned so a rerun of the same command produces byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

_METADATA = {"Software": "ebsg"}


def _save(fig, path) -> str:
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return str(path)


def plot_loss_curves(rows, path) -> str:
    """Training losses per epoch; validation task loss on the right axis."""
    epochs = [row["epoch"] for row in rows]
    fig, ax = plt.subplots(figsize=(7.0, 4.0), constrained_layout=True)
    for key in ("total", "L_t", "L_e", "L_r"):
        ax.plot(epochs, [row[key] for row in rows], marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.grid(True, alpha=0.3)
    val = [(e, row["val_metrics"]["task_loss"]) for e, row in zip(epochs, rows)
           if row.get("val_metrics")]
    if val:
        twin = ax.twinx()
        twin.plot(*zip(*val), color="black", linestyle="--", label="val task loss")
        twin.set_ylabel("validation task loss")
        lines = ax.get_lines() + twin.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], fontsize=8)
    else:
        ax.legend(fontsize=8)
    mode = rows[0].get("mode", "?") if rows else "?"
    ax.set_title(f"training curves ({mode})")
    return _save(fig, path)


def plot_metric_bars(report: dict, path) -> str:
    """Grouped recall bars per K from an evaluation report."""
    ks = [str(k) for k in report["k"]]
    groups = [("recall", "R@K"), ("mean_recall", "mR@K"),
              ("zero_shot_recall", "zsR@K")]
    fig, ax = plt.subplots(figsize=(7.0, 4.0), constrained_layout=True)
    width = 0.8 / len(groups)
    xs = np.arange(len(ks))
    for g, (key, label) in enumerate(groups):
        vals = [report[key].get(k) for k in ks]
        heights = [0.0 if v is None else float(v) for v in vals]
        ax.bar(xs + g * width, heights, width, label=label)
    ax.set_xticks(xs + width * (len(groups) - 1) / 2)
    ax.set_xticklabels([f"K={k}" for k in ks])
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("recall")
    ax.legend(fontsize=8)
    ax.set_title(f"{report['setting']} on {report['split']} "
                 f"(violation rate {report['violation_rate']:.3f})")
    return _save(fig, path)


def plot_energy_trajectory(energies, path, label="refinement") -> str:
    """Per-step energies of one sampler run."""
    fig, ax = plt.subplots(figsize=(6.0, 3.5), constrained_layout=True)
    ax.plot(range(len(energies)), energies, marker=".", label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("energy")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_predicate_marginals(marginals: dict, target, path) -> str:
    """Realized per-split predicate distributions against the Zipf target."""
    target = np.asarray(target, dtype=np.float64)
    ks = np.arange(len(target))
    fig, ax = plt.subplots(figsize=(7.0, 4.0), constrained_layout=True)
    names = sorted(marginals)
    width = 0.8 / (len(names) + 1)
    ax.bar(ks, target, width, label="zipf target", color="black", alpha=0.7)
    for g, split in enumerate(names, start=1):
        ax.bar(ks + g * width, np.asarray(marginals[split], dtype=np.float64),
               width, label=split)
    ax.set_xticks(ks + 0.4)
    ax.set_xticklabels([str(int(k)) for k in ks])
    ax.set_xlabel("predicate class")
    ax.set_ylabel("frequency")
    ax.legend(fontsize=8)
    ax.set_title("predicate marginals")
    return _save(fig, path)
