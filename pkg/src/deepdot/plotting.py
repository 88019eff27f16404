"""Figures for reports: metric box plots, volume slices, training curves and
measurement amplitudes.  All functions write a PNG and return its path."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def metric_boxplots(groups, path, metrics=("rmse", "pearson", "ssim", "cnr")):
    """One panel per metric, one box per method.

    Parameters
    ----------
    groups : dict
        ``{method: [report_dict, ...]}`` where each report maps metric names
        to values.
    """
    names = list(groups)
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.2))
    for ax, metric in zip(np.atleast_1d(axes), metrics):
        data = [[r[metric] for r in groups[n] if np.isfinite(r[metric])] for n in names]
        ax.boxplot(data, whis=1.5)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_title(metric)
    return _save(fig, path)


def volume_slices(volumes, path, z=None, titles=None):
    """Same axial slice of several volumes side by side on a shared scale."""
    volumes = [np.asarray(v) for v in volumes]
    z = volumes[0].shape[2] // 2 if z is None else z
    vmax = max(float(v.max()) for v in volumes) or 1.0
    fig, axes = plt.subplots(1, len(volumes), figsize=(3 * len(volumes), 3), squeeze=False)
    for i, (ax, v) in enumerate(zip(axes[0], volumes)):
        im = ax.imshow(v[:, :, z].T, origin="lower", vmin=0, vmax=vmax, cmap="viridis")
        if titles:
            ax.set_title(titles[i])
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def training_curves(history, path):
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.semilogy(epochs, [h["train_loss"] for h in history], label="train")
    ax.semilogy(epochs, [h["val_loss"] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.legend()
    return _save(fig, path)


def amplitude_vs_distance(separation, amplitudes, path, labels=None):
    """Log amplitude against source-detector separation for one or more data sets."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for i, a in enumerate(amplitudes):
        ax.semilogy(separation, np.abs(a), ".", ms=3, label=labels[i] if labels else None)
    ax.set_xlabel("separation (mm)")
    ax.set_ylabel("amplitude")
    if labels:
        ax.legend()
    return _save(fig, path)
