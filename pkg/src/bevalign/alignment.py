"""Pose-supervised contrastive alignment of camera BEV maps against the lidar BEV.

A camera map (query, in the camera's own planar grid) is compared with the
lidar map (reference, ego grid) under a candidate relative pose: every query
cell center is moved into the lidar frame, the lidar features are bilinearly
interpolated there, and the inner products are summed. The true pose should
score above poses borrowed from the other cameras.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, ValidationError
from .geometry import BevGridSpec, BevMap, Se3Pose, planar_distance, rot_y, transform_points
from .lifting import splat, splat_backward
from .model import (
    Params,
    RigGeometry,
    camera_head_backward,
    camera_head_forward,
    check_finite,
    lidar_head_backward,
    lidar_head_forward,
)

NORMALIZATIONS = ("mean", "sum")
_SNAP = 1e-9


@dataclass
class AlignmentConfig:
    tau0: float = 0.1
    normalization: str = "mean"
    sigma_trans: float = 1.0
    sigma_rot: float = 0.1
    num_samples: int = 8  # N_s, positive included

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValidationError(f"normalization must be one of {NORMALIZATIONS}")
        if not self.tau0 > 0:
            raise ValidationError("tau0 must be positive")
        if self.num_samples < 2:
            raise ValidationError("need at least one negative (num_samples >= 2)")
        if self.sigma_trans < 0 or self.sigma_rot < 0:
            raise ValidationError("sampling sigmas must be non-negative")

    @property
    def log_tau0(self) -> float:
        return math.log(self.tau0)


@dataclass(frozen=True, eq=False)
class PoseSampleSet:
    positive: Se3Pose
    negatives: list[Se3Pose] = field(default_factory=list)

    def __post_init__(self):
        if not self.negatives:
            raise ValidationError("need at least one negative pose")
        for n in self.negatives:
            if planar_distance(n, self.positive) <= 1e-9:
                raise ValidationError("a negative duplicates the positive pose")

    @property
    def n_samples(self) -> int:
        return 1 + len(self.negatives)

    def poses(self) -> list[Se3Pose]:
        return [self.positive, *self.negatives]


@dataclass(frozen=True)
class SimilarityReport:
    score: float
    valid_cell_count: int


@dataclass(frozen=True, eq=False)
class WarpPlan:
    """Bilinear sampling plan: four corner indices and weights per query cell."""

    index: np.ndarray  # (Q, 4) flat ref cells
    weight: np.ndarray  # (Q, 4)
    inside: np.ndarray  # (Q,) all four corners inside the ref grid
    n_ref: int

    def valid(self, ref_valid_flat: np.ndarray) -> np.ndarray:
        corner_ok = ref_valid_flat[self.index] | (self.weight == 0)
        return self.inside & corner_ok.all(axis=1)

    def matrix(self, rows: np.ndarray, dtype=np.float64) -> sp.csr_matrix:
        """(Q, n_ref) interpolation matrix restricted to ``rows`` (bool mask)."""
        w = np.where(rows[:, None], self.weight, 0.0).astype(dtype)
        Q = self.index.shape[0]
        return sp.csr_matrix((w.reshape(-1), self.index.reshape(-1), np.arange(0, 4 * Q + 1, 4)),
                             shape=(Q, self.n_ref))


def _axis_corners(c: np.ndarray, n: int):
    near = np.abs(c - np.round(c)) < _SNAP
    c = np.where(near, np.round(c), c)
    inside = (c >= 0) & (c <= n - 1)
    i0 = np.clip(np.floor(c), 0, max(n - 2, 0)).astype(np.int64)
    frac = np.where(inside, c - i0, 0.0)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, frac, inside


def warp_plan(ref_grid: BevGridSpec, T: Se3Pose, query_grid: BevGridSpec) -> WarpPlan:
    """Where every query cell center lands in the reference grid under ``T``."""
    ctr = query_grid.cell_centers().reshape(-1, 2)
    pts = np.stack([ctr[:, 0], np.zeros(len(ctr)), ctr[:, 1]], axis=1)
    pl = transform_points(T, pts)
    cx = (pl[:, 0] - ref_grid.x_min) / ref_grid.cell_size - 0.5
    cz = (pl[:, 2] - ref_grid.z_min) / ref_grid.cell_size - 0.5
    x0, x1, fx, inx = _axis_corners(cx, ref_grid.cells_x)
    z0, z1, fz, inz = _axis_corners(cz, ref_grid.cells_z)
    nz = ref_grid.cells_z
    idx = np.stack([x0 * nz + z0, x1 * nz + z0, x0 * nz + z1, x1 * nz + z1], axis=1)
    w = np.stack([(1 - fx) * (1 - fz), fx * (1 - fz), (1 - fx) * fz, fx * fz], axis=1)
    return WarpPlan(idx, w, inx & inz, ref_grid.n_cells)


def _interp(plan: WarpPlan, ref_flat: np.ndarray, rows: np.ndarray) -> np.ndarray:
    w = np.where(rows[:, None], plan.weight, 0.0).astype(ref_flat.dtype)
    out = w[:, 0:1] * ref_flat[plan.index[:, 0]]
    for k in range(1, 4):
        out = out + w[:, k:k + 1] * ref_flat[plan.index[:, k]]
    return out


def warp_sample(ref: BevMap, T: Se3Pose, query_grid: BevGridSpec) -> BevMap:
    plan = warp_plan(ref.grid, T, query_grid)
    valid = plan.valid(ref.valid_mask.reshape(-1))
    out = _interp(plan, ref.features.reshape(ref.grid.n_cells, -1), valid)
    return BevMap(query_grid.with_dim(ref.dim), out.reshape(query_grid.shape + (ref.dim,)),
                  valid.reshape(query_grid.shape))


def similarity_arrays(q_flat, q_valid, ref_flat, ref_valid, plan: WarpPlan, normalization="mean"):
    """Score plus what the backward pass needs."""
    m = q_valid & plan.valid(ref_valid)
    n = int(m.sum())
    if n == 0:
        return 0.0, 0, (m, None, 0.0)
    warped = _interp(plan, ref_flat, m)
    dots = np.einsum("qd,qd->q", q_flat[m], warped[m])
    total = float(dots.sum())
    scale = 1.0 / n if normalization == "mean" else 1.0
    return total * scale, n, (m, warped, scale)


def similarity_backward(q_flat, plan: WarpPlan, cache, g_score: float):
    """Gradients of the score w.r.t. the query and reference features."""
    m, warped, scale = cache
    if warped is None:
        return np.zeros_like(q_flat), None
    c = g_score * scale
    g_q = np.where(m[:, None], warped * c, 0.0)
    A = plan.matrix(m, q_flat.dtype)
    g_ref = np.asarray(A.T @ (q_flat * np.where(m, c, 0.0)[:, None].astype(q_flat.dtype)))
    return g_q.astype(q_flat.dtype), g_ref


def similarity(query: BevMap, ref: BevMap, T: Se3Pose, cfg: AlignmentConfig | None = None) -> SimilarityReport:
    norm = "mean" if cfg is None else cfg.normalization
    plan = warp_plan(ref.grid, T, query.grid)
    s, n, _ = similarity_arrays(query.features.reshape(query.grid.n_cells, -1), query.valid_mask.reshape(-1),
                                ref.features.reshape(ref.grid.n_cells, -1), ref.valid_mask.reshape(-1),
                                plan, norm)
    return SimilarityReport(s, n)


def info_nce_loss(scores, tau: float) -> float:
    """Contrastive loss with the positive score first; the positive stays in the denominator."""
    return info_nce_grads(scores, math.log(tau))[0]


def info_nce_grads(scores, log_tau: float):
    """Loss, d loss / d scores and d loss / d log_tau."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise ValidationError("need a positive and at least one negative score")
    if not np.all(np.isfinite(s)):
        raise NumericalError("non-finite similarity score", stage="info_nce")
    tau = math.exp(log_tau)
    z = s / tau
    top = z.max()
    e = np.exp(z - top)
    lse = top + math.log(e.sum())
    loss = lse - z[0]
    soft = e / e.sum()
    soft_minus = soft.copy()
    soft_minus[0] -= 1.0
    g_s = soft_minus / tau
    g_log_tau = -float(np.dot(soft_minus, z))
    return float(loss), g_s, g_log_tau


def sample_negative_poses(rig_poses, query_id: int, n: int, sigma_trans: float, sigma_rot: float,
                          seed) -> list[Se3Pose]:
    """Poses of other cameras, jittered in x, z and yaw."""
    if n < 0:
        raise ValidationError("n must be non-negative")
    if n == 0:
        return []
    others = [j for j in range(len(rig_poses)) if j != query_id]
    if not others:
        raise ValidationError("negative sampling needs a rig with more than one camera")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(others), size=n)
    noise = rng.normal(size=(n, 3)) * np.array([sigma_trans, sigma_trans, sigma_rot])
    out = []
    for j, (dx, dz, dyaw) in zip(picks, noise):
        base = rig_poses[others[j]]
        out.append(Se3Pose(rot_y(dyaw) @ base.rotation, base.translation + np.array([dx, 0.0, dz])))
    return out


@dataclass
class SceneTensors:
    """Per-scene network inputs."""

    camera_features: list[np.ndarray]  # N_c x (H', W', C_c)
    lidar_inputs: np.ndarray  # (X, Z, C_l), normalised
    lidar_valid: np.ndarray  # (X, Z)


def loss_and_gradients(scene: SceneTensors, params: Params, geom: RigGeometry,
                       negatives: list[list[Se3Pose]], cfg: AlignmentConfig,
                       cameras: list[int] | None = None, with_grads: bool = True):
    """Mean contrastive loss over query cameras and gradients for every head and ``log_tau``.

    ``negatives[i]`` are the negative poses for camera ``i``. Fusion is not in
    this path: each camera map is aligned against the raw lidar projection.
    """
    cams = list(range(len(geom.cameras))) if cameras is None else list(cameras)
    ego = geom.ego_grid
    lid = lidar_head_forward(params, scene.lidar_inputs, scene.lidar_valid)
    check_finite([lid], "lidar_head")
    ref = lid.reshape(ego.n_cells, -1)
    ref_valid = scene.lidar_valid.reshape(-1)
    log_tau = float(params["log_tau"])
    grads: Params = {}
    g_ref = np.zeros_like(ref)
    g_log_tau = 0.0
    total = 0.0
    w = 1.0 / len(cams)
    for i in cams:
        cg = geom.cameras[i]
        feats = scene.camera_features[i]
        G, probs = camera_head_forward(params, feats)
        check_finite([G, probs], "camera_head")
        q = splat(cg.query_table, probs, G)
        qv = cg.query_table.covered_cells.reshape(-1)
        check_finite([q], "lift_and_pool")
        poses = [cg.ego_from_query, *negatives[i]]
        plans = [warp_plan(ego, T, geom.query_grid) for T in poses]
        outs = [similarity_arrays(q, qv, ref, ref_valid, pl, cfg.normalization) for pl in plans]
        loss, g_s, g_lt = info_nce_grads([o[0] for o in outs], log_tau)
        total += w * loss
        if not with_grads:
            continue
        g_log_tau += w * g_lt
        g_q = np.zeros_like(q)
        for pl, o, gs in zip(plans, outs, g_s):
            gq, gr = similarity_backward(q, pl, o[2], w * gs)
            g_q += gq
            if gr is not None:
                g_ref += gr
        g_probs, g_G = splat_backward(cg.query_table, probs, G, g_q)
        camera_head_backward(params, feats, probs, g_G, g_probs, grads)
    if not math.isfinite(total):
        raise NumericalError("non-finite alignment loss", stage="info_nce")
    if not with_grads:
        return total, {}
    lidar_head_backward(scene.lidar_inputs, scene.lidar_valid, g_ref.reshape(lid.shape), grads)
    grads["log_tau"] = np.asarray(g_log_tau)
    check_finite(grads.values(), "backward")
    return total, grads


def pose_scores(query_flat, query_valid, ref_flat, ref_valid, ref_grid, query_grid, poses,
                normalization="mean") -> np.ndarray:
    """Similarity of one query/reference pair under each candidate pose."""
    return np.array([similarity_arrays(query_flat, query_valid, ref_flat, ref_valid,
                                       warp_plan(ref_grid, T, query_grid), normalization)[0]
                     for T in poses])
