"""Segmentation metrics and PCA colouring of latent BEV maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import BevMap


@dataclass
class MetricsReport:
    """IoU in percent per class; ``nan`` marks classes absent from both prediction and truth."""

    per_class_iou: list[float]
    miou: float
    scene_count: int = 0
    loss_curve: list[float] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    label: str = ""

    @property
    def present(self) -> list[int]:
        return [k for k, v in enumerate(self.per_class_iou) if not math.isnan(v)]


def confusion_counts(pred, gt, num_classes: int, mask=None) -> np.ndarray:
    """(K, K) counts indexed [gt, pred]."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if mask is not None:
        m = np.asarray(mask, bool).reshape(-1)
        pred, gt = pred[m], gt[m]
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[list[float], float]:
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    ious = [float(100.0 * t / u) if u > 0 else math.nan for t, u in zip(tp, union)]
    present = [v for v in ious if not math.isnan(v)]
    return ious, float(np.mean(present)) if present else math.nan


def evaluate_miou(pred, gt, num_classes: int | None = None, mask=None) -> MetricsReport:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    ious, miou = iou_from_confusion(confusion_counts(pred, gt, num_classes, mask))
    return MetricsReport(ious, miou, scene_count=1)


FALLBACK_COLOR = 0.5


def pca_project(latent: BevMap, rel_tol: float = 1e-9) -> np.ndarray:
    """Top three principal components of valid-cell features as an RGB image in [0, 1].

    Components with (near-)zero variance map to a constant mid-grey channel.
    Invalid cells are black.
    """
    valid = latent.valid_mask
    if valid.sum() < 3:
        raise ValidationError("PCA projection needs at least three valid cells")
    X = latent.features[valid].astype(np.float64)
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / len(Xc)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = max(float(evals[0]), 0.0)
    rgb = np.full((len(X), 3), FALLBACK_COLOR)
    for c in range(min(3, X.shape[1])):
        if top <= 0 or evals[c] <= rel_tol * top:
            continue
        v = evecs[:, c]
        # sign convention: largest-magnitude loading positive
        v = v * np.sign(v[np.argmax(np.abs(v))])
        proj = Xc @ v
        lo, hi = proj.min(), proj.max()
        if hi - lo > 0:
            rgb[:, c] = (proj - lo) / (hi - lo)
    img = np.zeros(latent.grid.shape + (3,))
    img[valid] = rgb
    return np.clip(img, 0.0, 1.0)
