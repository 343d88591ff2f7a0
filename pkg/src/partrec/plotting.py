"""Figure rendering for training logs, evaluation reports, and image grids.

Everything draws through the Agg backend and writes straight to files,
so the functions are safe on headless machines and in tests.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .geometry import ContractViolation  # noqa: E402
from .formats import read_jsonl  # noqa: E402

__all__ = ["plot_training_curves", "plot_eval_summary", "plot_view_grid"]


def plot_training_curves(log_path, out_path) -> Path:
    """Loss-term curves from a training log, one line per term, log y."""
    rows = read_jsonl(log_path)
    if not rows:
        raise ContractViolation(f"training log {log_path} is empty")
    steps = [r["step"] for r in rows]
    terms = [k for k in rows[0]
             if k not in ("step", "beta", "resolution", "lr")]
    fig, (ax, ax2) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    for term in terms:
        vals = np.array([r[term] for r in rows])
        if np.all(vals == 0):
            continue
        style = {"linewidth": 2.2} if term == "total" else {"alpha": 0.75}
        ax.plot(steps, np.maximum(vals, 1e-12), label=term, **style)
    ax.set_yscale("log")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, ncol=3)
    ax.grid(alpha=0.3)
    ax2.plot(steps, [r["resolution"] for r in rows], label="resolution",
             drawstyle="steps-post")
    ax2.set_ylabel("res")
    ax2b = ax2.twinx()
    ax2b.plot(steps, [1.0 / r["beta"] for r in rows], color="tab:red",
              label="1/beta", alpha=0.7)
    ax2b.set_ylabel("1/beta", color="tab:red")
    ax2.set_xlabel("step")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_eval_summary(records: list[dict], out_path) -> Path:
    """Per-scene metric bars for an evaluation report."""
    if not records:
        raise ContractViolation("no evaluation records to plot")
    labels = [f"{r['template']}\n#{r['seed']}" for r in records]
    x = np.arange(len(records))
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    panels = (("psnr", "novel-view PSNR (dB)", None),
              ("d_giou", "box distance d_gIoU", (0.0, 2.0)),
              ("type_accuracy", "motion-type accuracy", (0.0, 1.05)))
    for ax, (key, title, ylim) in zip(axes, panels):
        vals = [r[key] for r in records]
        ax.bar(x, vals, color="tab:blue", width=0.7)
        ax.axhline(float(np.mean(vals)), color="tab:orange", linewidth=1.2,
                   label=f"mean {np.mean(vals):.2f}")
        ax.set_title(title, fontsize=10)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=6)
        if ylim is not None:
            ax.set_ylim(*ylim)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_view_grid(rows: list[list[np.ndarray]], out_path,
                   row_labels: list[str] | None = None,
                   col_labels: list[str] | None = None) -> Path:
    """Grid of images, one list per row; grayscale arrays are accepted."""
    if not rows or not rows[0]:
        raise ContractViolation("image grid must be non-empty")
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(1.6 * n_cols, 1.7 * n_rows),
                             squeeze=False)
    for i, row in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.set_axis_off()
            if j >= len(row):
                continue
            img = np.asarray(row[j])
            if img.ndim == 2:
                ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
            else:
                ax.imshow(np.clip(img, 0.0, 1.0))
            if i == 0 and col_labels and j < len(col_labels):
                ax.set_title(col_labels[j], fontsize=8)
            if j == 0 and row_labels and i < len(row_labels):
                ax.text(-0.08, 0.5, row_labels[i], fontsize=8,
                        rotation=90, va="center", ha="center",
                        transform=ax.transAxes)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
