"""Learnable parameters and the per-modality projection heads.

Parameters live in a flat ``dict[str, ndarray]`` so that optimisers,
gradient checks and the checkpoint container can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .fusion import CrossAttentionParams, LatentBevEncoderParams
from .geometry import BevGridSpec, CameraIntrinsics, DepthBins, Se3Pose, compose, invert
from .lifting import CellAssociationTable, build_frustum, precompute_associations

Params = dict[str, np.ndarray]

CAMERA_KEYS = ("camera.W", "camera.b", "depth.W", "depth.b")
LIDAR_KEYS = ("lidar.W", "lidar.b")


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int  # D
    camera_channels: int  # C_c
    lidar_channels: int  # C_l
    depth_bins: int  # L
    feat_h: int
    feat_w: int
    num_classes: int
    block_count: int = 1
    window: int = 3


def init_params(dims: ModelDims, seed: int = 0, dtype=np.float32, head_scale: float = 0.1) -> Params:
    rng = np.random.default_rng(seed)
    D, C, L = dims.feature_dim, dims.camera_channels, dims.depth_bins
    p: Params = {
        "camera.W": rng.normal(0, head_scale / math.sqrt(C), (C, D)),
        "camera.b": np.zeros(D),
        "depth.W": rng.normal(0, head_scale / math.sqrt(C), (C, L)),
        "depth.b": np.zeros((dims.feat_h, dims.feat_w, L)),
        "lidar.W": rng.normal(0, head_scale / math.sqrt(dims.lidar_channels), (dims.lidar_channels, D)),
        "lidar.b": np.zeros(D),
    }
    p.update(CrossAttentionParams.init(D, dims.block_count, dims.window, rng, np.float64).to_dict())
    p.update(LatentBevEncoderParams.init(D, rng, np.float64).to_dict())
    K = dims.num_classes
    p["head.W"] = rng.normal(0, 1.0 / math.sqrt(D), (D, K))
    p["head.b"] = np.zeros(K)
    for s in range(3):
        p[f"head.mix{s}"] = rng.normal(0, 0.02, (9, K, K))
        p[f"head.mix{s}_b"] = np.zeros(K)
    p["log_tau"] = np.array(math.log(0.1))
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


def cast_params(p: Params, dtype) -> Params:
    return {k: np.asarray(v, dtype=dtype).copy() for k, v in p.items()}


def check_finite(arrays, stage: str):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite values", stage=stage)


def fusion_params(p: Params, window: int = 3) -> CrossAttentionParams:
    return CrossAttentionParams.from_dict(p, "fusion", window)


def encoder_params(p: Params) -> LatentBevEncoderParams:
    return LatentBevEncoderParams.from_dict(p, "encoder")


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def camera_head_forward(p: Params, feats: np.ndarray):
    """Per-pixel projection to D and depth distribution over L bins.

    Depth logits combine a content term and a learnable per-pixel prior.
    """
    G = feats @ p["camera.W"] + p["camera.b"]
    probs = softmax(feats @ p["depth.W"] + p["depth.b"])
    return G, probs


def camera_head_backward(p: Params, feats, probs, g_G, g_probs, grads: Params):
    g_z = probs * (g_probs - (probs * g_probs).sum(axis=-1, keepdims=True))
    f2 = feats.reshape(-1, feats.shape[-1])
    _acc(grads, "camera.W", f2.T @ g_G.reshape(-1, g_G.shape[-1]))
    _acc(grads, "camera.b", g_G.sum(axis=(0, 1)))
    _acc(grads, "depth.W", f2.T @ g_z.reshape(-1, g_z.shape[-1]))
    _acc(grads, "depth.b", g_z)


def lidar_inputs(raw: np.ndarray) -> np.ndarray:
    """Fixed normalisation of raw pillar channels before the learnable projection."""
    out = np.array(raw, dtype=np.float64, copy=True)
    out[..., 0] = np.log1p(out[..., 0])
    out[..., 1] = np.log1p(out[..., 1])
    return out


def lidar_head_forward(p: Params, inputs: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return (inputs @ p["lidar.W"] + p["lidar.b"]) * valid[..., None]


def lidar_head_backward(inputs, valid, g_out, grads: Params):
    g = g_out * valid[..., None]
    _acc(grads, "lidar.W", inputs.reshape(-1, inputs.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
    _acc(grads, "lidar.b", g.sum(axis=(0, 1)))


def _acc(grads: Params, key: str, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


@dataclass(frozen=True, eq=False)
class CameraGeometry:
    intrinsics: CameraIntrinsics
    ego_from_cam: Se3Pose
    ego_from_query: Se3Pose  # planar frame under the camera, yaw-aligned with its optical axis
    ego_table: CellAssociationTable
    query_table: CellAssociationTable


def planar_frame(ego_from_cam: Se3Pose) -> Se3Pose:
    fwd = ego_from_cam.rotation[:, 2]
    yaw = math.atan2(fwd[0], fwd[2])
    t = ego_from_cam.translation
    return Se3Pose.planar(t[0], t[2], yaw, y=t[1])


@dataclass(frozen=True, eq=False)
class RigGeometry:
    """Association tables for every camera into the ego grid and its own query grid."""

    cameras: tuple[CameraGeometry, ...]
    ego_grid: BevGridSpec
    query_grid: BevGridSpec
    bins: DepthBins
    feat_shape: tuple[int, int]

    @classmethod
    def build(cls, cameras, feat_shape, bins: DepthBins, ego_grid: BevGridSpec,
              query_grid: BevGridSpec) -> "RigGeometry":
        """``cameras`` is a sequence of (intrinsics, ego_from_cam) pairs."""
        if not cameras:
            raise ValidationError("rig needs at least one camera")
        out = []
        for K, T in cameras:
            fr = build_frustum(K, feat_shape, bins)
            planar = planar_frame(T)
            out.append(CameraGeometry(K, T, planar, precompute_associations(fr, T, ego_grid),
                                      precompute_associations(fr, compose(invert(planar), T), query_grid)))
        return cls(tuple(out), ego_grid, query_grid, bins, tuple(feat_shape))

    @property
    def positive_poses(self) -> list[Se3Pose]:
        return [c.ego_from_query for c in self.cameras]
