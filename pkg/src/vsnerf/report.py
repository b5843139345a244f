"""Run reports: CSV/JSON tables and matplotlib figures written to files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRIC_COLUMNS = ("iteration", "psnr", "ssim", "color_loss", "depth_loss", "total_loss", "wall_ms")


def _fmt(x) -> str:
    if isinstance(x, float):
        return "inf" if math.isinf(x) else repr(x)
    return str(x)


def write_metrics_csv(path, evals) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for m in evals:
            row = asdict(m)
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def write_train_log(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("iteration", "sampler", "color_loss", "depth_loss", "total_loss"))
        for row in zip(history.iterations, history.sampler, history.color_loss, history.depth_loss,
                       history.total_loss):
            w.writerow([_fmt(x) for x in row])


def write_json(path, obj) -> None:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"cannot serialise {type(o).__name__}")

    Path(path).write_text(json.dumps(obj, indent=2, default=default, allow_nan=True) + "\n")


def plot_training(path, history) -> None:
    """Loss curves (log scale) with the sampler switch marked, plus held-out PSNR."""
    fig, (ax_l, ax_p) = plt.subplots(1, 2, figsize=(10, 3.8))
    if history.iterations:
        it = np.asarray(history.iterations)
        ax_l.semilogy(it, history.color_loss, lw=0.6, label="colour")
        total = np.asarray(history.total_loss)
        if np.all(total > 0):
            ax_l.semilogy(it, total, lw=0.6, alpha=0.7, label="total")
        switches = [i for i in range(1, len(history.sampler))
                    if history.sampler[i] != history.sampler[i - 1]]
        for i in switches:
            ax_l.axvline(history.iterations[i], color="k", ls="--", lw=0.8)
        ax_l.legend(loc="upper right")
    ax_l.set_xlabel("iteration")
    ax_l.set_ylabel("loss")
    evals = [m for m in history.evals if math.isfinite(m.psnr)]
    if evals:
        ax_p.plot([m.iteration for m in evals], [m.psnr for m in evals], "o-")
    ax_p.set_xlabel("iteration")
    ax_p.set_ylabel("held-out PSNR [dB]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_renders(path, targets: Sequence[np.ndarray], renders: Sequence[np.ndarray],
                 depths: Sequence[np.ndarray]) -> None:
    """One row per view: ground truth, render, absolute error and expected depth."""
    n = len(targets)
    fig, axes = plt.subplots(n, 4, figsize=(10, 2.6 * n), squeeze=False)
    for r, (gt, img, dep) in enumerate(zip(targets, renders, depths)):
        err = np.abs(np.clip(img, 0, 1) - gt).mean(axis=-1)
        panels = [(gt, "target", None), (np.clip(img, 0, 1), "render", None),
                  (err, "|error|", "magma"), (dep, "depth", "viridis")]
        for ax, (data, title, cmap) in zip(axes[r], panels):
            im = ax.imshow(data, cmap=cmap, interpolation="nearest")
            ax.set_title(title, fontsize=9)
            ax.axis("off")
            if cmap:
                fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_similarity(path, raw: np.ndarray, distilled: np.ndarray) -> None:
    """Side-by-side correspondence similarity matrices before and after distillation."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.8))
    for ax, mat, title in zip(axes, (raw, distilled), ("raw cosine", "distilled cosine")):
        im = ax.imshow(mat, cmap="viridis", interpolation="nearest")
        hits = np.mean(np.argmax(mat, axis=1) == np.arange(mat.shape[0]))
        ax.set_title(f"{title} (diag argmax {hits:.0%})", fontsize=9)
        ax.set_xlabel("view B point")
        ax.set_ylabel("view A point")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_profile(path, depths: np.ndarray, scores: np.ndarray, surface: float = None) -> None:
    """Consistency score along one ray, with the true surface depth if known."""
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(depths, scores, ".-", lw=0.8)
    if surface is not None and math.isfinite(surface):
        ax.axvline(surface, color="r", ls="--", lw=0.8, label="surface")
        ax.legend()
    ax.set_xlabel("ray depth t")
    ax.set_ylabel("consistency score")
    ax.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else [])
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def plot_ablation(path, result) -> None:
    """Mean held-out PSNR per arm with standard-error bars and per-seed points."""
    arms = list(result.psnr)
    means = [result.mean(a) for a in arms]
    errs = [0.0 if math.isnan(result.stderr(a)) else result.stderr(a) for a in arms]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    x = np.arange(len(arms))
    ax.bar(x, means, yerr=errs, capsize=4, color="0.8", edgecolor="k")
    for i, a in enumerate(arms):
        ax.plot(np.full(len(result.psnr[a]), i), result.psnr[a], "o", ms=4)
    lo = min(min(v) for v in result.psnr.values())
    hi = max(max(v) for v in result.psnr.values())
    ax.set_ylim(lo - 0.5, hi + 0.5)
    ax.set_xticks(x, arms)
    ax.set_ylabel("held-out PSNR [dB]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
