"""Matplotlib figures written alongside the CLI's JSON/CSV outputs."""
from __future__ import annotations

import csv
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .bucketing import EvalReport
from .domain import CLASS_ORDER
from .tpe import Trial

_CLASS_LABELS = [c.label for c in CLASS_ORDER]


def save_loss_curve(history: Sequence[float], path: str, title: str = "training loss") -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(history) + 1, 1), history, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean cross-entropy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confusion_matrix(report: EvalReport, path: str) -> str:
    cm = np.asarray(report.confusion, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(3), _CLASS_LABELS, rotation=20)
    ax.set_yticks(range(3), _CLASS_LABELS)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"macro F1 = {report.macro_f1_all:.3f} (n = {report.n_eval})")
    for i in range(3):
        for j in range(3):
            color = "white" if cm[i, j] > cm.max() / 2 else "black"
            ax.text(j, i, int(cm[i, j]), ha="center", va="center", color=color)
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_eval_csv(report: EvalReport, path: str) -> str:
    """Per-class metric rows, one line per class, plus a macro summary row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "precision", "recall", "f1"])
        for i, label in enumerate(_CLASS_LABELS):
            writer.writerow(
                [
                    label,
                    f"{report.per_class['precision'][i]:.6f}",
                    f"{report.per_class['recall'][i]:.6f}",
                    f"{report.per_class['f1'][i]:.6f}",
                ]
            )
        writer.writerow(["macro", "", "", f"{report.macro_f1_all:.6f}"])
    return path


def save_tpe_convergence(history: Sequence[Trial], path: str) -> str:
    finite = [(t.trial_index, t.objective) for t in history if not t.failed]
    xs = [i for i, _ in finite]
    best_so_far = np.minimum.accumulate([v for _, v in finite])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(xs, [v for _, v in finite], s=14, alpha=0.6, label="trial objective")
    ax.plot(xs, best_so_far, color="tab:red", lw=1.5, label="best so far")
    ax.set_xlabel("trial")
    ax.set_ylabel("objective")
    ax.set_title("hyperparameter search convergence")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
