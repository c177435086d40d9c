"""Planar pose recovery by maximising map similarity.

A coarse grid over (x, z, yaw) around an initial guess is scored first, then
the best candidate is polished by a pattern search whose steps halve until
they fall below a tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alignment import similarity_arrays, warp_plan
from .errors import ValidationError
from .geometry import BevMap, Se3Pose


@dataclass(frozen=True)
class PoseSearch:
    trans_range: float = 2.5
    trans_step: float = 0.5
    yaw_range_deg: float = 12.0
    yaw_step_deg: float = 3.0
    refine_trans_tol: float = 0.02
    refine_yaw_tol_deg: float = 0.1
    normalization: str = "ncc"  # "ncc", or any similarity normalization ("mean", "sum")
    min_margin: float = 1e-9  # relative to the best score; below this the estimate is flagged

    def __post_init__(self):
        if self.normalization not in ("ncc", "mean", "sum"):
            raise ValidationError("normalization must be 'ncc', 'mean' or 'sum'")
        if not (self.trans_step > 0 and self.yaw_step_deg > 0 and self.trans_range >= 0 and self.yaw_range_deg >= 0):
            raise ValidationError("search ranges must be non-negative and steps positive")

    def offsets(self):
        nt = int(round(self.trans_range / self.trans_step))
        ny = int(round(self.yaw_range_deg / self.yaw_step_deg))
        t = np.arange(-nt, nt + 1) * self.trans_step
        y = np.radians(np.arange(-ny, ny + 1) * self.yaw_step_deg)
        return t, t, y


@dataclass
class PoseEstimate:
    pose: Se3Pose
    score: float
    confidence: float
    low_confidence: bool
    coarse_scores: np.ndarray  # (n_x, n_z, n_yaw)
    evaluations: int


class _Scorer:
    def __init__(self, query: BevMap, ref: BevMap, normalization: str):
        self.q = query.features.reshape(query.grid.n_cells, -1).astype(np.float64)
        self.qv = query.valid_mask.reshape(-1)
        self.r = ref.features.reshape(ref.grid.n_cells, -1).astype(np.float64)
        self.rv = ref.valid_mask.reshape(-1)
        self.qgrid, self.rgrid, self.norm = query.grid, ref.grid, normalization
        self.calls = 0

    def __call__(self, x, z, yaw):
        self.calls += 1
        plan = warp_plan(self.rgrid, Se3Pose.planar(x, z, yaw), self.qgrid)
        if self.norm != "ncc":
            s, n, _ = similarity_arrays(self.q, self.qv, self.r, self.rv, plan, self.norm)
            return s, n
        s, n, (m, warped, _) = similarity_arrays(self.q, self.qv, self.r, self.rv, plan, "sum")
        if n == 0:
            return 0.0, 0
        return zncc(self.q[m], warped[m]), n


def zncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalised cross-correlation of two (N, D) feature sets; 0 if either is constant."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    scale = max(na, nb, 1e-300)
    if na <= 1e-12 * scale or nb <= 1e-12 * scale:
        return 0.0
    return float((a * b).sum() / (na * nb))


def _second_best(scores: np.ndarray, best: tuple[int, int, int]) -> float:
    """Highest score outside the 3x3x3 neighbourhood of ``best``."""
    mask = np.ones(scores.shape, bool)
    sl = tuple(slice(max(b - 1, 0), b + 2) for b in best)
    mask[sl] = False
    rest = scores[mask & np.isfinite(scores)]
    return float(rest.max()) if rest.size else -math.inf


def pose_recovery(query: BevMap, ref: BevMap, init: Se3Pose | None = None,
                  search: PoseSearch = PoseSearch()) -> PoseEstimate:
    """Find the ref-from-query planar pose maximising similarity.

    The default score is the zero-mean normalised cross-correlation over the
    overlap. A per-cell mean of inner products is biased here: poses that push
    weak cells out of the overlap raise the mean even when they are wrong.

    Confidence is the gap between the best coarse score and the best coarse
    score outside its immediate neighbourhood, so a single broad peak is not
    mistaken for ambiguity.
    """
    if query.dim != ref.dim:
        raise ValidationError(f"feature widths differ: {query.dim} vs {ref.dim}")
    if not query.valid_mask.any() or not ref.valid_mask.any():
        raise ValidationError("pose recovery needs valid cells in both maps")
    x0, z0, yaw0 = (0.0, 0.0, 0.0) if init is None else init.planar_params()
    score = _Scorer(query, ref, search.normalization)
    tx, tz, ty = search.offsets()
    coarse = np.full((len(tx), len(tz), len(ty)), -np.inf)
    for a, dx in enumerate(tx):
        for b, dz in enumerate(tz):
            for c, dyaw in enumerate(ty):
                s, n = score(x0 + dx, z0 + dz, yaw0 + dyaw)
                if n > 0:
                    coarse[a, b, c] = s
    if not np.isfinite(coarse).any():
        raise ValidationError("no candidate pose overlaps valid cells of both maps")
    best = np.unravel_index(int(np.argmax(coarse)), coarse.shape)
    best_score = float(coarse[best])
    cur = np.array([x0 + tx[best[0]], z0 + tz[best[1]], yaw0 + ty[best[2]]])

    steps = np.array([search.trans_step / 2, search.trans_step / 2, math.radians(search.yaw_step_deg) / 2])
    tols = np.array([search.refine_trans_tol, search.refine_trans_tol, math.radians(search.refine_yaw_tol_deg)])
    while np.any(steps >= tols):
        moved = False
        for k in range(3):
            if steps[k] < tols[k]:
                continue
            for sgn in (1.0, -1.0):
                cand = cur.copy()
                cand[k] += sgn * steps[k]
                s, n = score(*cand)
                if n > 0 and s > best_score:
                    cur, best_score, moved = cand, s, True
                    break
        if not moved:
            steps = steps / 2
    margin = best_score - _second_best(coarse, best) if np.isfinite(coarse).sum() > 1 else 0.0
    margin = float(margin) if math.isfinite(margin) else 0.0
    low = margin <= search.min_margin * max(1.0, abs(best_score))
    return PoseEstimate(Se3Pose.planar(*cur), best_score, margin, low, coarse, score.calls)
