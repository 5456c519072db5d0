"""Matplotlib figure rendering for the CLI report paths.

Each command that writes a delimited output also renders a figure next to it:
training curves, per-class metric bars, the alpha sweep, and a 2-D PCA view
of exported embeddings.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_train_curves(log, path):
    epochs = [r["epoch"] for r in log.records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [r["sup_loss"] for r in log.records], label="supervised")
    ax1.plot(epochs, [r["con_loss"] for r in log.records], label="contrastive")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r["val_dice"] for r in log.records], color="tab:green",
             label="train dice")
    ax2b = ax2.twinx()
    ax2b.plot(epochs, [r["lambda"] for r in log.records], color="tab:orange",
              alpha=0.6, label="lambda(t)")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("dice")
    ax2b.set_ylabel("lambda")
    ax2.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_metric_bars(table, path):
    classes = sorted({r["class"] for r in table.rows})
    mean_dice = [np.mean([r["dice"] for r in table.rows if r["class"] == c])
                 for c in classes]
    mean_jacc = [np.mean([r["jaccard"] for r in table.rows if r["class"] == c])
                 for c in classes]
    x = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.18, mean_dice, width=0.36, label="dice")
    ax.bar(x + 0.18, mean_jacc, width=0.36, label="jaccard")
    agg = table.aggregate()
    ax.axhline(agg["dice"], color="gray", linestyle="--",
               label=f"weighted dice = {agg['dice']:.3f}")
    ax.set_xticks(x, [f"class {c}" for c in classes])
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_ablation(rows, path):
    alphas = [r["alpha"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(alphas, [r["dice"] for r in rows], "o-", label="test dice")
    ax.set_xlabel("alpha")
    ax.set_ylabel("aggregate dice")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_embeddings(cube_classes, embeddings, silhouette, path):
    centered = embeddings - embeddings.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for cls in np.unique(cube_classes):
        sel = cube_classes == cls
        ax.scatter(coords[sel, 0], coords[sel, 1], label=f"class {cls}", s=24)
    ax.set_title(f"embedding PCA (silhouette={silhouette:.3f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
