"""Figures written next to the CSV outputs of ``bench``, ``edit --sweep`` and ``train-toy``."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MODE_COLORS = {"target-text": "#1f77b4", "null-text": "#d62728"}


def _style(ax, xlabel, ylabel, title=None):
    ax.set_xlabel(xlabel, fontsize=11)
    ax.set_ylabel(ylabel, fontsize=11)
    if title:
        ax.set_title(title, fontsize=12)
    ax.grid(alpha=0.3, linewidth=0.6)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(summary: dict, path) -> Path:
    """Mean per-step reconstruction loss per mode, plus total iterations."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4), gridspec_kw={"width_ratios": [3, 1]})
    coef = summary["optimizer"]["threshold_coefficient"]
    for mode, stats in summary["modes"].items():
        curve = stats["mean_step_loss"]
        left.semilogy(range(1, len(curve) + 1), curve, label=mode, color=MODE_COLORS.get(mode))
    steps = len(next(iter(summary["modes"].values()))["mean_step_loss"])
    left.semilogy(range(1, steps + 1), [s * coef for s in range(1, steps + 1)], "k--", linewidth=0.8,
                  label="early-stop threshold")
    left.legend(frameon=False)
    _style(left, "denoising step", "final loss per step (MSE)")

    modes = list(summary["modes"])
    totals = [summary["modes"][m]["total_iterations"] for m in modes]
    right.bar(modes, totals, color=[MODE_COLORS.get(m, "gray") for m in modes])
    _style(right, "", "optimizer iterations")
    return _save(fig, path)


def plot_sweep(rows: list, path) -> Path:
    """Edit-vs-reconstruction latent MSE and edit PSNR as the ramp start varies."""
    rows = sorted(rows, key=lambda r: r["omega_start"], reverse=True)
    labels = [f'{r["omega_start"]:g}-{r["omega_end"]:g}' for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(labels, [r["latent_mse_edit_vs_reconstruction"] for r in rows], "o-", color="#1f77b4")
    _style(ax, "interpolation ramp", "latent MSE (edit vs reconstruction)")
    twin = ax.twinx()
    twin.plot(labels, [r["edit"]["psnr"] for r in rows], "s--", color="#ff7f0e")
    twin.set_ylabel("edit PSNR vs original (dB)", fontsize=11, color="#ff7f0e")
    return _save(fig, path)


def plot_training(curve, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    if curve:
        steps, losses = zip(*curve)
        ax.semilogy(steps, losses, color="#2ca02c")
    _style(ax, "training step", "denoising loss")
    return _save(fig, path)
