"""PNG figures written next to the CSV/JSON reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

# fixed metadata so repeated runs write identical bytes
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curves(path, curves: dict[str, list[float]], title: str = "", ylabel: str = "loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, ys in curves.items():
        if ys:
            ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_iou_bars(path, reports: list[MetricsReport], class_names: list[str], title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.4))
    k = len(class_names)
    width = 0.8 / max(len(reports), 1)
    x = np.arange(k + 1)
    for i, r in enumerate(reports):
        vals = [0.0 if math.isnan(v) else v for v in r.per_class_iou] + [0.0 if math.isnan(r.miou) else r.miou]
        ax.bar(x + (i - (len(reports) - 1) / 2) * width, vals, width, label=r.label or f"run {i}")
    ax.set_xticks(x)
    ax.set_xticklabels(list(class_names) + ["mIoU"], rotation=30, ha="right")
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_rgb_map(path, rgb: np.ndarray, title: str = "") -> Path:
    """Show an (X, Z, 3) map with +z up and +x right."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.transpose(rgb, (1, 0, 2))[::-1], interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_error_hist(path, errors, cell_size: float = 1.0, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    errs = np.asarray(errors, dtype=np.float64)
    ax.hist(errs, bins=np.linspace(0, max(float(errs.max(initial=0.0)), cell_size) * 1.05, 21))
    ax.axvline(0.5 * cell_size, color="k", ls="--", lw=1, label="half cell")
    if errs.size:
        ax.axvline(float(np.median(errs)), color="r", lw=1, label="median")
    ax.set_xlabel("translation error (m)")
    ax.set_ylabel("scenes")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
