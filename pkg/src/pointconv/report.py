"""CSV tables and matplotlib figures for CLI reports.

Every reporting command writes delimited output next to a rendered figure
in the chosen output directory; figures use the Agg backend so runs are
headless-safe.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "ensure_dir",
    "write_csv",
    "training_curves",
    "memory_figure",
    "sweep_figure",
    "ablation_figure",
    "filter_montage",
]


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(history, path):
    """Loss and eval-metric curves over epochs."""
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [h["train_loss"] for h in history], marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(epochs, [h["eval_accuracy"] for h in history], marker="o", ms=3, label="accuracy")
    if history and history[0].get("eval_miou") is not None:
        ax2.plot(epochs, [h["eval_miou"] for h in history], marker="s", ms=3, label="mIoU")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("eval metric")
    ax2.set_ylim(0, 1.05)
    ax2.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def memory_figure(report, path):
    """Log-scale bars: analytic filter memory of both operator forms."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = ["reference", "factored"]
    values = [report["analytic_naive_bytes"] / 2**30, report["analytic_efficient_bytes"] / 2**30]
    bars = ax.bar(labels, values, color=["#c44e52", "#4c72b0"])
    ax.set_yscale("log")
    ax.set_ylabel("filter memory (GiB)")
    d = report["dims"]
    ax.set_title(f"B={d['b']} N={d['n']} K={d['k']} Cin={d['c_in']} Cout={d['c_out']} Cmid={d['c_mid']}", fontsize=9)
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v, f"{v:.4g}", ha="center", va="bottom", fontsize=8)
    return _save(fig, path)


def sweep_figure(rows, path):
    """Mean +/- sd accuracy against the WeightNet middle width."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = [r[0] for r in rows]
    means = [r[1] for r in rows]
    sds = [r[2] for r in rows]
    ax.errorbar(xs, means, yerr=sds, marker="o", capsize=4)
    ax.set_xscale("log", base=2)
    ax.set_xticks(xs, [str(x) for x in xs])
    ax.set_xlabel("c_mid")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.05)
    return _save(fig, path)


def ablation_figure(rows, path):
    """mIoU per density-handling variant."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = [r[0] for r in rows]
    values = [r[1] for r in rows]
    ax.bar(labels, values, color="#55a868")
    ax.set_ylabel("test mIoU")
    ax.set_ylim(0, 1.05)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    return _save(fig, path)


def filter_montage(images, path, max_panels=64):
    """Grid of sampled weight-function images (one per channel pair)."""
    side = images.shape[0]
    c_in, c_out = images.shape[2], images.shape[3]
    panels = [(ci, co) for ci in range(c_in) for co in range(c_out)][:max_panels]
    cols = int(np.ceil(np.sqrt(len(panels))))
    rows = int(np.ceil(len(panels) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (ci, co) in zip(axes.ravel(), panels):
        ax.imshow(images[:, :, ci, co], cmap="gray", interpolation="nearest")
        ax.set_title(f"{ci}→{co}", fontsize=7)
    return _save(fig, path)
