"""Figures written next to the CSV outputs: loss curves, metric bars, decompositions."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
}


def _figsize(width: float = 6.0, ratio: float | None = None):
    ratio = ratio or (math.sqrt(5) - 1) / 2
    return width, width * ratio


def plot_loss_history(history: list[dict], path, title: str = "training loss") -> None:
    """Total and component losses against step, log-scaled."""
    if not history:
        return
    steps = np.array([r["step"] for r in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_figsize())
        for key in history[0]:
            if key == "step":
                continue
            vals = np.array([r[key] for r in history], dtype=float)
            if not np.any(vals > 0):
                continue
            lw, alpha = (1.6, 1.0) if key == "total" else (0.8, 0.7)
            ax.plot(steps, np.where(vals > 0, vals, np.nan), lw=lw, alpha=alpha, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(ncol=3, frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


_PANELS = (("psnr", "PSNR (dB)"), ("ssim", "SSIM"), ("uqi", "UQI"),
           ("ang_mean", "angular mean (deg)"), ("deltaE", "CIEDE2000"), ("ge", "gray entropy (bits)"))


def plot_metric_report(report, path) -> None:
    """One bar panel per metric, one bar per image; dashed line marks the mean."""
    names = [r.name for r in report.rows]
    agg = report.aggregate()
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 3, figsize=(10, 5.5))
        for ax, (key, label) in zip(axes.ravel(), _PANELS):
            vals = np.array([getattr(r, key) for r in report.rows], dtype=float)
            finite = np.isfinite(vals)
            ax.bar(x[finite], vals[finite], color="0.55")
            if (~finite).any():
                ax.scatter(x[~finite], np.zeros((~finite).sum()), marker="^", color="k", label="inf")
                ax.legend(frameon=False)
            mean = getattr(agg, key)
            if math.isfinite(mean):
                ax.axhline(mean, ls="--", lw=1, color="C3")
            ax.set_title(label)
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=60, ha="right", fontsize=6)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_decomposition(s, r, l, path, title: str = "") -> None:
    """Input, reflectance and illumination side by side."""
    def hwc(a):
        a = np.clip(np.asarray(a, dtype=float)[0], 0, 1)
        return a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)

    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
        for ax, img, label in zip(axes, (s, r, l), ("input", "reflectance", "illumination")):
            im = hwc(img)
            ax.imshow(im, cmap="gray" if im.ndim == 2 else None, vmin=0, vmax=1)
            ax.set_title(label)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
