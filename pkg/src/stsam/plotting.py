"""Matplotlib figures written next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path, note: str = ""):
    # fixed metadata keeps reruns byte-identical
    meta = {"Software": None, "Description": note or None}
    fig.savefig(path, format="png", metadata=meta)
    plt.close(fig)


def plot_training(report, path, note: str = "") -> None:
    """Per-epoch training and validation loss, best epoch marked."""
    epochs = [e.epoch for e in report.epochs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(epochs, [e.train_loss for e in report.epochs], label="train", color="0.3")
        ax.plot(epochs, [e.val_loss for e in report.epochs], label="validation", color="C3")
        if report.best_epoch:
            ax.axvline(report.best_epoch, color="C3", ls=":", lw=1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss (scaled units)")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        _save(fig, path, note)


def plot_metrics(reports, path, note: str = "") -> None:
    """Grouped bars of RMSE and MAPE per channel for each predictor."""
    names = [r.name for r in reports]
    channels = list(reports[0].channels)
    x = np.arange(len(channels))
    width = 0.8 / len(reports)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 3.0))
        for ax, metric, label in ((axes[0], "rmse", "RMSE"), (axes[1], "mape", "MAPE (%)")):
            for i, r in enumerate(reports):
                vals = [getattr(r.channels[c], metric) for c in channels]
                ax.bar(x + (i - (len(reports) - 1) / 2) * width, vals, width, label=names[i])
            ax.set_xticks(x, channels)
            ax.set_ylabel(label)
        axes[0].legend(frameon=False)
        _save(fig, path, note)


def plot_forecast(region_index, pred, path, truth=None, note: str = "") -> None:
    """Predicted (and optionally observed) next-slot flows per region."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, figsize=(6.0, 4.0), sharex=True)
        for c, (ax, label) in enumerate(zip(axes, ("inflow", "outflow"))):
            ax.plot(region_index, pred[:, c], "o", ms=3, label="forecast")
            if truth is not None:
                ax.plot(region_index, truth[:, c], "x", ms=3, color="0.4", label="observed")
            ax.set_ylabel(label)
        axes[-1].set_xlabel("region")
        axes[0].legend(frameon=False)
        _save(fig, path, note)
