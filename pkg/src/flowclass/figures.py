"""Figure rendering for report outputs.

Every report-producing CLI path writes a PNG next to its delimited output:
the pre-training loss curve, the per-iteration validation F1 trace, the
evaluation confusion matrix, and the per-variant ablation summary.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": "flowclass"}  # keep PNG bytes run-independent


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def save_loss_figure(curve, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if curve:
        steps, losses = zip(*curve)
        ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("contrastive loss")
    ax.set_title("pre-training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_iteration_figure(report: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    entries = report.get("iterations", [])
    its = [e["iteration"] for e in entries]
    f1s = [e["val_macro_f1"] for e in entries]
    best = [e["best_f1"] for e in entries]
    ax.axhline(report["m0_val_f1"], color="gray", ls="--", lw=1,
               label="initial model")
    if its:
        ax.plot(its, f1s, "o-", label="iteration F1")
        ax.plot(its, best, "s--", label="best so far")
    ax.set_xlabel("pseudo-label iteration")
    ax.set_ylabel("validation macro-F1")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_confusion_figure(confusion, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(confusion, cmap="Blues")
    n = len(confusion)
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(confusion[i][j]), ha="center", va="center",
                    fontsize=8)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    _save(fig, path)


def save_ablation_figure(summary: dict, path) -> None:
    """summary: variant -> list of per-seed macro-F1 values."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    variants = list(summary)
    for x, variant in enumerate(variants):
        values = summary[variant]
        ax.scatter([x] * len(values), values, alpha=0.6, s=18)
        ordered = sorted(values)
        mid = len(ordered) // 2
        med = ordered[mid] if len(ordered) % 2 else \
            0.5 * (ordered[mid - 1] + ordered[mid])
        ax.plot([x - 0.2, x + 0.2], [med, med], color="k", lw=2)
    ax.set_xticks(range(len(variants)))
    ax.set_xticklabels(variants, rotation=20, fontsize=8)
    ax.set_ylabel("test macro-F1")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    _save(fig, path)
