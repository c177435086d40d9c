"""Pose-supervised pretraining and segmentation fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import alignment as al
from .config import RunConfig
from .errors import NumericalError, ValidationError
from .geometry import BevMap, Se3Pose
from .fusion import cross_attend_backward, cross_attend_forward, encode_backward, encode_forward
from .lifting import splat, splat_backward
from .metrics import MetricsReport, confusion_counts, iou_from_confusion
from .model import (
    ModelDims,
    Params,
    RigGeometry,
    camera_head_backward,
    camera_head_forward,
    cast_params,
    check_finite,
    encoder_params,
    fusion_params,
    init_params,
    lidar_head_backward,
    lidar_head_forward,
    lidar_inputs,
)
from .pillars import pool_vertical, voxelize
from .segmentation import focal_loss, head_backward, head_forward, upsample_mask
from .simulator import SceneSample, SensorRig, default_rig, derive_seed

log = logging.getLogger(__name__)


def build_rig(cfg: RunConfig) -> SensorRig:
    return default_rig(cfg.rig.rig_params(), cfg.rig.lidar_params())


def build_geometry(cfg: RunConfig, rig: SensorRig | None = None) -> RigGeometry:
    rig = build_rig(cfg) if rig is None else rig
    return RigGeometry.build(rig.cameras(), (cfg.rig.feat_h, cfg.rig.feat_w), cfg.bins.bins(),
                             cfg.grid.ego(cfg.model.feature_dim), cfg.grid.query(cfg.model.feature_dim))


def model_dims(cfg: RunConfig) -> ModelDims:
    return ModelDims(cfg.model.feature_dim, cfg.model.camera_channels, cfg.model.lidar_channels,
                     cfg.bins.bins().L, cfg.rig.feat_h, cfg.rig.feat_w, cfg.world.num_classes,
                     cfg.model.block_count, cfg.model.window)


def fresh_params(cfg: RunConfig, seed: int | None = None, dtype=np.float32) -> Params:
    p = init_params(model_dims(cfg), cfg.train.seed if seed is None else seed, dtype, cfg.model.head_scale)
    p["log_tau"] = np.asarray(math.log(cfg.alignment.tau0), dtype=dtype)
    return p


def alignment_config(cfg: RunConfig) -> al.AlignmentConfig:
    a = cfg.alignment
    return al.AlignmentConfig(a.tau0, a.normalization, a.sigma_trans, a.sigma_rot, a.num_samples)


@dataclass
class Scene:
    tensors: al.SceneTensors
    labels: np.ndarray | None
    seed: int


def prepare_scene(sample: SceneSample, cfg: RunConfig, dtype=np.float32) -> Scene:
    grid = cfg.grid
    vox = voxelize(sample.cloud, grid.voxel_size, grid.voxel_bounds())
    pillars = pool_vertical(vox, grid.ego())
    t = al.SceneTensors([np.asarray(f, dtype=dtype) for f in sample.camera_features],
                        lidar_inputs(pillars.features).astype(dtype), pillars.valid_mask)
    return Scene(t, sample.labels, sample.seed)


def scene_negatives(geom: RigGeometry, acfg: al.AlignmentConfig, seed: int, n: int | None = None):
    n = acfg.num_samples - 1 if n is None else n
    pos = geom.positive_poses
    return [al.sample_negative_poses(pos, i, n, acfg.sigma_trans, acfg.sigma_rot, derive_seed(seed, i))
            for i in range(len(pos))]


class AdamW:
    """Adaptive moments with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, params: Params, lr=1e-3, betas=(0.9, 0.999), weight_decay=1e-2, eps=1e-8,
                 lr_scale: dict[str, float] | None = None):
        self.lr, self.b1, self.b2, self.wd, self.eps = lr, betas[0], betas[1], weight_decay, eps
        self.lr_scale = dict(lr_scale or {})  # parameter-name prefix -> learning-rate multiplier
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    @staticmethod
    def decays(key: str, value: np.ndarray) -> bool:
        return value.ndim >= 2 and key != "depth.b"

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            g = np.asarray(g, dtype=p.dtype)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd and self.decays(k, p):
                upd = upd + self.wd * p
            params[k] = (p - self.lr * self._scale(k) * upd).astype(p.dtype)

    def _scale(self, key: str) -> float:
        for prefix, s in self.lr_scale.items():
            if key.startswith(prefix):
                return s
        return 1.0


def make_optimizer(params: Params, cfg: RunConfig) -> AdamW:
    t = cfg.train
    return AdamW(params, t.lr, (t.beta1, t.beta2), t.weight_decay, lr_scale={"depth.": t.depth_lr_scale})


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


@dataclass
class PretrainResult:
    params: Params
    loss_curve: list[float]
    initial_loss: float
    final_loss: float
    depth_sum_error: float = 0.0


def alignment_loss(scenes: list[Scene], params: Params, geom: RigGeometry, cfg: RunConfig,
                   epoch: int = 0) -> float:
    """Mean alignment loss over scenes with the negatives drawn for ``epoch``."""
    acfg = alignment_config(cfg)
    total = 0.0
    for idx, sc in enumerate(scenes):
        neg = scene_negatives(geom, acfg, derive_seed(cfg.train.seed, epoch, sc.seed))
        total += al.loss_and_gradients(sc.tensors, params, geom, neg, acfg, with_grads=False)[0]
    return total / max(len(scenes), 1)


def _max_depth_sum_error(scene: Scene, params: Params) -> float:
    err = 0.0
    for f in scene.tensors.camera_features:
        _, probs = camera_head_forward(params, f)
        err = max(err, float(np.abs(probs.sum(axis=-1, dtype=np.float64) - 1.0).max()))
    return err


def pretrain(scenes: list[Scene], geom: RigGeometry, cfg: RunConfig, params: Params | None = None,
             callback=None) -> PretrainResult:
    """Minimise the alignment loss over ``scenes``; deterministic given ``cfg.train.seed``."""
    if not scenes:
        raise ValidationError("pretraining needs at least one scene")
    t = cfg.train
    params = fresh_params(cfg) if params is None else cast_params(params, np.float32)
    acfg = alignment_config(cfg)
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(derive_seed(t.seed, 17))
    initial = alignment_loss(scenes, params, geom, cfg, epoch=0)
    curve: list[float] = []
    depth_err = 0.0
    last_good = cast_params(params, np.float32)
    for epoch in range(t.pretrain_epochs):
        losses = []
        for batch in _batches(rng.permutation(len(scenes)), t.batch_size):
            acc: Params = {}
            for idx in batch:
                sc = scenes[idx]
                neg = scene_negatives(geom, acfg, derive_seed(t.seed, epoch, sc.seed))
                loss, g = al.loss_and_gradients(sc.tensors, params, geom, neg, acfg)
                losses.append(loss)
                for k, v in g.items():
                    acc[k] = acc[k] + v if k in acc else v
            opt.step(params, {k: v / len(batch) for k, v in acc.items()})
            depth_err = max(depth_err, _max_depth_sum_error(scenes[batch[0]], params))
        mean = float(np.mean(losses))
        if not math.isfinite(mean) or not all(np.all(np.isfinite(v)) for v in params.values()):
            err = NumericalError(f"pretraining diverged at epoch {epoch}", stage="pretrain")
            err.last_good = last_good
            raise err
        last_good = cast_params(params, np.float32)
        curve.append(mean)
        log.info("pretrain epoch %d loss %.5f tau %.4f", epoch, mean, math.exp(float(params["log_tau"])))
        if callback:
            callback(epoch, mean)
    final = alignment_loss(scenes, params, geom, cfg, epoch=max(t.pretrain_epochs - 1, 0))
    return PretrainResult(params, curve, initial, final, depth_err)


def discrimination_rate(scenes: list[Scene], params: Params, geom: RigGeometry, cfg: RunConfig,
                        n_negatives: int = 32, seed: int = 12345) -> tuple[float, list[bool]]:
    """Fraction of scenes where the true pose outscores every sampled negative.

    Scene ``j`` uses camera ``j mod N_c`` as the query.
    """
    acfg = alignment_config(cfg)
    ego = geom.ego_grid
    hits = []
    for j, sc in enumerate(scenes):
        i = j % len(geom.cameras)
        cg = geom.cameras[i]
        G, probs = camera_head_forward(params, sc.tensors.camera_features[i])
        q = splat(cg.query_table, probs, G)
        ref = lidar_head_forward(params, sc.tensors.lidar_inputs, sc.tensors.lidar_valid).reshape(ego.n_cells, -1)
        neg = al.sample_negative_poses(geom.positive_poses, i, n_negatives, acfg.sigma_trans, acfg.sigma_rot,
                                       derive_seed(seed, sc.seed))
        s = al.pose_scores(q, cg.query_table.covered_cells.reshape(-1), ref, sc.tensors.lidar_valid.reshape(-1),
                           ego, geom.query_grid, [cg.ego_from_query, *neg], acfg.normalization)
        hits.append(bool(s[0] > s[1:].max()))
    return float(np.mean(hits)) if hits else math.nan, hits


# ---------------------------------------------------------------- segmentation path

@dataclass
class Trainable:
    camera: bool = True
    lidar: bool = True
    fusion: bool = True

    @classmethod
    def from_config(cls, finetune_modality: str, freeze_fusion: bool = False) -> "Trainable":
        return cls(finetune_modality in ("both", "camera"), finetune_modality in ("both", "lidar"),
                   not freeze_fusion)


def camera_bev(params: Params, scene: al.SceneTensors, geom: RigGeometry):
    ego = geom.ego_grid
    acc = None
    valid = np.zeros(ego.n_cells, bool)
    heads = []
    for cg, f in zip(geom.cameras, scene.camera_features):
        G, probs = camera_head_forward(params, f)
        b = splat(cg.ego_table, probs, G)
        acc = b if acc is None else acc + b
        valid |= cg.ego_table.covered_cells.reshape(-1)
        heads.append((G, probs))
    return acc.reshape(ego.shape + (-1,)), valid.reshape(ego.shape), heads


def latent_forward(params: Params, scene: al.SceneTensors, geom: RigGeometry, modality: str = "both",
                   window: int = 3):
    """Camera and lidar BEV -> fused -> encoded latent map (X, Z, D) and its mask."""
    cam, cam_valid, heads = camera_bev(params, scene, geom)
    lid = lidar_head_forward(params, scene.lidar_inputs, scene.lidar_valid)
    lid_valid = scene.lidar_valid
    if modality == "camera_only":
        lid, lid_valid = np.zeros_like(lid), np.zeros_like(lid_valid)
    elif modality == "lidar_only":
        cam, cam_valid = np.zeros_like(cam), np.zeros_like(cam_valid)
    check_finite([cam, lid], "bev")
    fp = fusion_params(params, window)
    fused, fmask, fcache = cross_attend_forward(lid, lid_valid, cam, cam_valid, fp)
    ep = encoder_params(params)
    latent, lmask, ecache = encode_forward(fused, fmask, ep)
    check_finite([latent], "encoder")
    cache = dict(heads=heads, fcache=fcache, ecache=ecache, fp=fp, ep=ep, modality=modality,
                 lid_valid=lid_valid)
    return latent, lmask, cache


def latent_backward(params: Params, scene: al.SceneTensors, geom: RigGeometry, cache, g_latent,
                    grads: Params, train: Trainable = Trainable()):
    g_fused, eg = encode_backward(cache["ecache"], g_latent, cache["ep"])
    g_lid, g_cam, fg = cross_attend_backward(cache["fcache"], g_fused, cache["fp"])
    if train.fusion:
        grads.update(eg)
        grads.update(fg)
    modality = cache["modality"]
    if train.lidar and modality != "camera_only":
        lidar_head_backward(scene.lidar_inputs, scene.lidar_valid, g_lid, grads)
    if train.camera and modality != "lidar_only":
        g_cam = g_cam.reshape(geom.ego_grid.n_cells, -1)
        for cg, f, (G, probs) in zip(geom.cameras, scene.camera_features, cache["heads"]):
            g_probs, g_G = splat_backward(cg.ego_table, probs, G, g_cam)
            camera_head_backward(params, f, probs, g_G, g_probs, grads)


def segmentation_loss_and_gradients(params: Params, scene: Scene, geom: RigGeometry, cfg: RunConfig,
                                    train: Trainable = Trainable(), modality: str = "both",
                                    with_grads: bool = True):
    latent, lmask, cache = latent_forward(params, scene.tensors, geom, modality, cfg.model.window)
    logits, hcache = head_forward(params, latent)
    check_finite([logits], "head")
    mask = upsample_mask(lmask)
    t = cfg.train
    loss, g_logits = focal_loss(logits, scene.labels, mask, t.focal_gamma, t.focal_alpha)
    if not with_grads:
        return loss, {}
    grads: Params = {}
    g_latent = head_backward(params, hcache, g_logits, grads)
    latent_backward(params, scene.tensors, geom, cache, g_latent, grads, train)
    check_finite(grads.values(), "segmentation_backward")
    return loss, grads


def predict(params: Params, scene: Scene, geom: RigGeometry, cfg: RunConfig, modality: str = "both"):
    latent, lmask, _ = latent_forward(params, scene.tensors, geom, modality, cfg.model.window)
    logits, _ = head_forward(params, latent)
    return logits, upsample_mask(lmask)


def evaluate_segmentation(params: Params, scenes: list[Scene], geom: RigGeometry, cfg: RunConfig,
                          modality: str = "both") -> MetricsReport:
    K = cfg.world.num_classes
    conf = np.zeros((K, K), dtype=np.int64)
    for sc in scenes:
        logits, mask = predict(params, sc, geom, cfg, modality)
        if not np.all(np.isfinite(logits[mask])):
            raise NumericalError("non-finite predictions", stage=f"eval:{modality}")
        conf += confusion_counts(logits.argmax(axis=-1), sc.labels, K, mask)
    ious, miou = iou_from_confusion(conf)
    return MetricsReport(ious, miou, scene_count=len(scenes), config_hash=cfg.config_hash,
                         seed=cfg.train.seed, label=modality)


def label_subset(n_scenes: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded scene subset; a smaller fraction is always a prefix of a larger one."""
    if not 0 < fraction <= 1:
        raise ValidationError("label_fraction must be in (0, 1]")
    k = int(round(fraction * n_scenes))
    if k < 1:
        raise ValidationError(f"label_fraction {fraction} of {n_scenes} scenes selects no scene")
    perm = np.random.default_rng(derive_seed(seed, 99)).permutation(n_scenes)
    return np.sort(perm[:k])


@dataclass
class FinetuneResult:
    params: Params
    loss_curve: list[float] = field(default_factory=list)
    subset: np.ndarray | None = None


def finetune(scenes: list[Scene], geom: RigGeometry, cfg: RunConfig, params: Params | None = None,
             callback=None) -> FinetuneResult:
    """Train the whole network (subject to freeze flags) on the labelled subset with focal loss."""
    t = cfg.train
    subset = label_subset(len(scenes), t.label_fraction, t.seed)
    params = fresh_params(cfg) if params is None else cast_params(params, np.float32)
    train = Trainable.from_config(t.finetune_modality, t.freeze_fusion)
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(derive_seed(t.seed, 23))
    curve = []
    for epoch in range(t.finetune_epochs):
        losses = []
        for batch in _batches(rng.permutation(subset), t.batch_size):
            acc: Params = {}
            for idx in batch:
                loss, g = segmentation_loss_and_gradients(params, scenes[idx], geom, cfg, train)
                losses.append(loss)
                for k, v in g.items():
                    acc[k] = acc[k] + v if k in acc else v
            opt.step(params, {k: v / len(batch) for k, v in acc.items()})
        mean = float(np.mean(losses))
        if not math.isfinite(mean):
            raise NumericalError(f"fine-tuning diverged at epoch {epoch}", stage="finetune")
        curve.append(mean)
        log.info("finetune epoch %d loss %.5f", epoch, mean)
        if callback:
            callback(epoch, mean)
    return FinetuneResult(params, curve, subset)


def scene_bevs(params: Params, scene: Scene, geom: RigGeometry) -> tuple[BevMap, BevMap]:
    """Pre-fusion camera BEV (all cameras summed) and lidar BEV, both on the ego grid."""
    cam, cam_valid, _ = camera_bev(params, scene.tensors, geom)
    lid = lidar_head_forward(params, scene.tensors.lidar_inputs, scene.tensors.lidar_valid)
    grid = geom.ego_grid.with_dim(cam.shape[-1])
    return (BevMap(grid, cam.astype(np.float64), cam_valid),
            BevMap(grid, lid.astype(np.float64), scene.tensors.lidar_valid.copy()))


def perturbed_initial_pose(seed: int, max_trans: float = 2.0, max_yaw_deg: float = 10.0) -> Se3Pose:
    """Planar offset drawn uniformly: translation up to ``max_trans`` in a random direction."""
    rng = np.random.default_rng(seed)
    r = max_trans * math.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * math.pi)
    return Se3Pose.planar(r * math.cos(a), r * math.sin(a), math.radians(rng.uniform(-max_yaw_deg, max_yaw_deg)))
