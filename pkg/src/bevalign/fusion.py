"""Camera/lidar BEV fusion: windowed cross-attention followed by a small encoder.

Lidar cells provide the queries, camera cells the keys and values. Each query
attends only to camera cells in a ``window x window`` neighbourhood, which
keeps the cost linear in the number of cells.

All grid tensors are (cells_x, cells_z, D). Forward functions return a cache
consumed by the matching ``*_backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import BevMap

LN_EPS = 1e-5


def _offsets(window: int):
    r = window // 2
    return r, [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]


def gather_neighbors(a: np.ndarray, window: int = 3) -> np.ndarray:
    """(X, Z, ...) -> (X, Z, window**2, ...) with zero padding."""
    r, offs = _offsets(window)
    X, Z = a.shape[:2]
    pad = np.pad(a, [(r, r), (r, r)] + [(0, 0)] * (a.ndim - 2))
    return np.stack([pad[r + di:r + di + X, r + dj:r + dj + Z] for di, dj in offs], axis=2)


def scatter_neighbors(g: np.ndarray, window: int = 3) -> np.ndarray:
    """Adjoint of :func:`gather_neighbors`."""
    r, offs = _offsets(window)
    X, Z = g.shape[:2]
    pad = np.zeros((X + 2 * r, Z + 2 * r) + g.shape[3:], dtype=g.dtype)
    for k, (di, dj) in enumerate(offs):
        pad[r + di:r + di + X, r + dj:r + dj + Z] += g[:, :, k]
    return pad[r:r + X, r:r + Z]


def dilate(mask: np.ndarray, window: int = 3) -> np.ndarray:
    return gather_neighbors(mask, window).any(axis=2)


@dataclass(eq=False)
class AttentionBlock:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    ln_scale: np.ndarray
    ln_shift: np.ndarray

    NAMES = ("W_q", "W_k", "W_v", "W_o", "ln_scale", "ln_shift")


@dataclass(eq=False)
class CrossAttentionParams:
    blocks: list[AttentionBlock]
    window: int = 3

    def __post_init__(self):
        if not self.blocks:
            raise ValidationError("block_count must be >= 1")
        D = self.blocks[0].W_q.shape[0]
        for b in self.blocks:
            for n in AttentionBlock.NAMES[:4]:
                if getattr(b, n).shape != (D, D):
                    raise ValidationError(f"{n} must be square {D}x{D}")
        if self.window < 1 or self.window % 2 == 0:
            raise ValidationError("attention window must be a positive odd number")

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @classmethod
    def init(cls, dim: int, block_count: int = 1, window: int = 3, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        s = 1.0 / math.sqrt(dim)
        blocks = [AttentionBlock(*(rng.normal(0, s, (dim, dim)).astype(dtype) for _ in range(4)),
                                 np.ones(dim, dtype), np.zeros(dim, dtype))
                  for _ in range(block_count)]
        return cls(blocks, window)

    def to_dict(self, prefix: str = "fusion") -> dict[str, np.ndarray]:
        return {f"{prefix}.{i}.{n}": getattr(b, n) for i, b in enumerate(self.blocks) for n in AttentionBlock.NAMES}

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "fusion", window: int = 3):
        blocks = []
        i = 0
        while f"{prefix}.{i}.W_q" in d:
            blocks.append(AttentionBlock(*(d[f"{prefix}.{i}.{n}"] for n in AttentionBlock.NAMES)))
            i += 1
        return cls(blocks, window)


@dataclass(eq=False)
class LatentBevEncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    mix: np.ndarray  # (window**2, D, D)
    mix_b: np.ndarray
    nonlinear: bool = field(default=True)

    NAMES = ("W1", "b1", "W2", "b2", "mix", "mix_b")

    def __post_init__(self):
        for n in self.NAMES:
            if not np.all(np.isfinite(getattr(self, n))):
                raise ValidationError(f"encoder parameter {n} is not finite")

    @classmethod
    def init(cls, dim: int, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        s = 1.0 / math.sqrt(dim)
        return cls(rng.normal(0, s, (dim, dim)).astype(dtype), np.zeros(dim, dtype),
                   rng.normal(0, s, (dim, dim)).astype(dtype), np.zeros(dim, dtype),
                   rng.normal(0, s / 3, (9, dim, dim)).astype(dtype), np.zeros(dim, dtype))

    def to_dict(self, prefix: str = "encoder") -> dict[str, np.ndarray]:
        return {f"{prefix}.{n}": getattr(self, n) for n in self.NAMES}

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "encoder"):
        return cls(*(d[f"{prefix}.{n}"] for n in cls.NAMES))


def _softmax_masked(scores, mask):
    s = np.where(mask, scores, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(s - top), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(z > 0, z, 1.0)


def attention_weights(x, y, mask_y, block: AttentionBlock, window: int = 3) -> np.ndarray:
    """Per-query softmax weights over the camera neighbourhood, (X, Z, window**2)."""
    D = x.shape[-1]
    q = x @ block.W_q
    kn = gather_neighbors(y @ block.W_k, window)
    mn = gather_neighbors(mask_y, window)
    return _softmax_masked(np.einsum("xzd,xzkd->xzk", q, kn) / math.sqrt(D), mn)


def _block_forward(x, mx, y, my, b: AttentionBlock, window):
    D = x.shape[-1]
    scale = 1.0 / math.sqrt(D)
    q = x @ b.W_q
    kn = gather_neighbors(y @ b.W_k, window)
    vn = gather_neighbors(y @ b.W_v, window)
    mn = gather_neighbors(my, window)
    a = _softmax_masked(np.einsum("xzd,xzkd->xzk", q, kn) * scale, mn)
    att = np.einsum("xzk,xzkd->xzd", a, vn)
    h = x + att @ b.W_o
    mu = h.mean(axis=-1, keepdims=True)
    sig = np.sqrt(((h - mu) ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = (h - mu) / sig
    out_mask = mx | mn.any(axis=2)
    out = (xhat * b.ln_scale + b.ln_shift) * out_mask[..., None]
    cache = (x, y, q, kn, vn, a, att, xhat, sig, out_mask, scale)
    return out, out_mask, cache


def _block_backward(cache, g_out, b: AttentionBlock, window):
    x, y, q, kn, vn, a, att, xhat, sig, out_mask, scale = cache
    g_out = g_out * out_mask[..., None]
    grads = {"ln_scale": np.einsum("xzd,xzd->d", g_out, xhat), "ln_shift": g_out.sum(axis=(0, 1))}
    gx_hat = g_out * b.ln_scale
    g_h = (gx_hat - gx_hat.mean(-1, keepdims=True)
           - xhat * (gx_hat * xhat).mean(-1, keepdims=True)) / sig
    flat = lambda t: t.reshape(-1, t.shape[-1])
    grads["W_o"] = flat(att).T @ flat(g_h)
    g_att = g_h @ b.W_o.T
    g_a = np.einsum("xzd,xzkd->xzk", g_att, vn)
    g_vn = a[..., None] * g_att[:, :, None, :]
    g_s = a * (g_a - (a * g_a).sum(axis=-1, keepdims=True)) * scale
    g_q = np.einsum("xzk,xzkd->xzd", g_s, kn)
    g_kn = g_s[..., None] * q[:, :, None, :]
    g_k = scatter_neighbors(g_kn, window)
    g_v = scatter_neighbors(g_vn, window)
    grads["W_q"] = flat(x).T @ flat(g_q)
    grads["W_k"] = flat(y).T @ flat(g_k)
    grads["W_v"] = flat(y).T @ flat(g_v)
    g_x = g_h + g_q @ b.W_q.T
    g_y = g_k @ b.W_k.T + g_v @ b.W_v.T
    return g_x, g_y, grads


def cross_attend_forward(x, mask_x, y, mask_y, params: CrossAttentionParams):
    caches = []
    for b in params.blocks:
        x, mask_x, c = _block_forward(x, mask_x, y, mask_y, b, params.window)
        caches.append(c)
    return x, mask_x, caches


def cross_attend_backward(caches, g_out, params: CrossAttentionParams, prefix: str = "fusion"):
    """Returns (grad lidar input, grad camera input, parameter grads keyed like ``to_dict``)."""
    grads = {}
    g_y_total = None
    for i in reversed(range(len(params.blocks))):
        g_out, g_y, gb = _block_backward(caches[i], g_out, params.blocks[i], params.window)
        g_y_total = g_y if g_y_total is None else g_y_total + g_y
        grads.update({f"{prefix}.{i}.{n}": v for n, v in gb.items()})
    return g_out, g_y_total, grads


def cross_attend(lidar_bev: BevMap, cam_bev: BevMap, params: CrossAttentionParams) -> BevMap:
    if not lidar_bev.grid.same_layout(cam_bev.grid):
        raise ValidationError("lidar and camera maps must share one grid")
    D = params.blocks[0].W_q.shape[0]
    if lidar_bev.dim != D or cam_bev.dim != D:
        raise ValidationError(f"both maps must have width {D}")
    x = lidar_bev.features * lidar_bev.valid_mask[..., None]
    y = cam_bev.features * cam_bev.valid_mask[..., None]
    out, mask, _ = cross_attend_forward(x, lidar_bev.valid_mask, y, cam_bev.valid_mask, params)
    return BevMap(lidar_bev.grid, out, mask)


def _act(a, nonlinear):
    return np.tanh(a) if nonlinear else a


def encode_forward(x, mask, p: LatentBevEncoderParams, window: int = 3):
    m = mask[..., None]
    x0 = x * m
    h1 = _act(x0 @ p.W1 + p.b1, p.nonlinear)
    h2 = _act(h1 @ p.W2 + p.b2, p.nonlinear) * m
    nb = gather_neighbors(h2, window)
    out_mask = dilate(mask, window)
    out = (np.einsum("xzkd,kde->xze", nb, p.mix) + p.mix_b) * out_mask[..., None]
    return out, out_mask, (x0, h1, h2, nb, mask, out_mask)


def encode_backward(cache, g_out, p: LatentBevEncoderParams, window: int = 3, prefix: str = "encoder"):
    x0, h1, h2, nb, mask, out_mask = cache
    g_out = g_out * out_mask[..., None]
    flat = lambda t: t.reshape(-1, t.shape[-1])
    grads = {f"{prefix}.mix": np.einsum("xzkd,xze->kde", nb, g_out),
             f"{prefix}.mix_b": g_out.sum(axis=(0, 1))}
    g_h2 = scatter_neighbors(np.einsum("xze,kde->xzkd", g_out, p.mix), window) * mask[..., None]
    g_a2 = g_h2 * (1.0 - h2 ** 2) if p.nonlinear else g_h2
    grads[f"{prefix}.W2"] = flat(h1).T @ flat(g_a2)
    grads[f"{prefix}.b2"] = g_a2.sum(axis=(0, 1))
    g_h1 = g_a2 @ p.W2.T
    g_a1 = g_h1 * (1.0 - h1 ** 2) if p.nonlinear else g_h1
    grads[f"{prefix}.W1"] = flat(x0).T @ flat(g_a1)
    grads[f"{prefix}.b1"] = g_a1.sum(axis=(0, 1))
    g_x = (g_a1 @ p.W1.T) * mask[..., None]
    return g_x, grads


def bev_encode(fused: BevMap, params: LatentBevEncoderParams) -> BevMap:
    out, mask, _ = encode_forward(fused.features, fused.valid_mask, params)
    return BevMap(fused.grid.with_dim(out.shape[-1]), out, mask)
