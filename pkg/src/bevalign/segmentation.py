"""Segmentation decoder and per-class binary focal loss.

The decoder classifies each latent cell, then upsamples three times by 2x
(nearest neighbour), adding a 3x3 mixing convolution after every stage.
"""

from __future__ import annotations

import numpy as np

from .fusion import gather_neighbors, scatter_neighbors

STAGES = 3
UPSAMPLE = 2 ** STAGES


def upsample2(a: np.ndarray) -> np.ndarray:
    return a.repeat(2, axis=0).repeat(2, axis=1)


def upsample2_backward(g: np.ndarray) -> np.ndarray:
    X, Z = g.shape[0] // 2, g.shape[1] // 2
    return g.reshape(X, 2, Z, 2, *g.shape[2:]).sum(axis=(1, 3))


def upsample_mask(mask: np.ndarray, factor: int = UPSAMPLE) -> np.ndarray:
    return mask.repeat(factor, axis=0).repeat(factor, axis=1)


def head_forward(p, latent: np.ndarray):
    """Latent (X, Z, D) -> logits (8X, 8Z, K)."""
    x = latent @ p["head.W"] + p["head.b"]
    cache = [latent]
    for s in range(STAGES):
        u = upsample2(x)
        nb = gather_neighbors(u)
        x = u + np.einsum("xzkc,kce->xze", nb, p[f"head.mix{s}"]) + p[f"head.mix{s}_b"]
        cache.append(nb)
    return x, cache


def head_backward(p, cache, g_out, grads):
    """Accumulates head parameter grads; returns the gradient w.r.t. the latent map."""
    latent = cache[0]
    g = g_out
    for s in reversed(range(STAGES)):
        nb = cache[s + 1]
        grads[f"head.mix{s}"] = np.einsum("xzkc,xze->kce", nb, g)
        grads[f"head.mix{s}_b"] = g.sum(axis=(0, 1))
        g_u = g + scatter_neighbors(np.einsum("xze,kce->xzkc", g, p[f"head.mix{s}"]))
        g = upsample2_backward(g_u)
    grads["head.W"] = latent.reshape(-1, latent.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    grads["head.b"] = g.sum(axis=(0, 1))
    return g @ p["head.W"].T


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_loss(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None,
               gamma: float = 2.0, alpha: float | None = 0.25):
    """Mean over masked cells of the per-class binary focal loss, summed over classes.

    ``alpha=None`` disables class weighting; with ``gamma=0`` the loss is then
    plain binary cross-entropy. Returns (loss, d loss / d logits).
    """
    K = logits.shape[-1]
    x = logits.reshape(-1, K).astype(np.float64)
    y = np.eye(K)[labels.reshape(-1).astype(np.int64)]
    m = np.ones(x.shape[0], bool) if mask is None else mask.reshape(-1)
    n = max(int(m.sum()), 1)
    sgn = 2.0 * y - 1.0
    z = sgn * x
    log_pt = _log_sigmoid(z)
    one_minus = np.exp(_log_sigmoid(-z))  # 1 - p_t
    pt = np.exp(log_pt)
    a_t = 1.0 if alpha is None else np.where(y > 0, alpha, 1.0 - alpha)
    mod = one_minus ** gamma if gamma != 0 else 1.0
    fl = -a_t * mod * log_pt
    loss = float((fl.sum(axis=1) * m).sum() / n)
    g = -a_t * sgn * mod * (one_minus - gamma * pt * log_pt)
    g = g * m[:, None] / n
    return loss, g.reshape(logits.shape).astype(logits.dtype)

