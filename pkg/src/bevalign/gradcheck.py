"""Central finite-difference checks of the hand-written reverse passes."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import alignment as al
from . import train as T
from .config import RunConfig
from .model import Params
from .simulator import derive_seed

FD_STEP = 1e-4
# Below this magnitude gradients are compared in absolute terms.
GRAD_FLOOR = 1e-6


def small_config(seed: int = 0) -> RunConfig:
    """A 12x12 ego grid, 8 depth bins and three tiny cameras."""
    cfg = RunConfig()
    cfg.override([
        "world.feature_dim=3", "world.nuisance_channels=1", "world.num_classes=3",
        "rig.num_cameras=3", "rig.feat_h=4", "rig.feat_w=6",
        "grid.x_min=-6", "grid.x_max=6", "grid.z_min=-6", "grid.z_max=6",
        "grid.query_x_min=-4", "grid.query_x_max=4", "grid.query_z_min=0", "grid.query_z_max=6",
        "bins.d_min=1", "bins.d_max=9", "bins.step=1",
        "model.feature_dim=4", "model.camera_channels=3",
        "alignment.num_samples=4", "alignment.sigma_trans=0.7", "alignment.sigma_rot=0.2",
        f"train.seed={seed}",
    ])
    return cfg.validate()


@dataclass
class Instance:
    cfg: RunConfig
    geom: object
    params: Params
    scene: T.Scene
    negatives: list


def random_instance(seed: int, dtype=np.float64) -> Instance:
    """Random parameters and inputs (float64) on the small rig."""
    cfg = small_config(seed)
    rng = np.random.default_rng(derive_seed(seed, 3))
    geom = T.build_geometry(cfg)
    params = T.fresh_params(cfg, seed=seed, dtype=dtype)
    for k, v in params.items():
        params[k] = (v + rng.normal(0, 0.3, v.shape)).astype(dtype)
    params["log_tau"] = np.asarray(np.log(rng.uniform(0.3, 1.5)), dtype=dtype)
    ego = geom.ego_grid
    cams = [rng.normal(size=(cfg.rig.feat_h, cfg.rig.feat_w, cfg.model.camera_channels)).astype(dtype)
            for _ in geom.cameras]
    valid = rng.uniform(size=ego.shape) < 0.75
    lid = np.where(valid[..., None], rng.uniform(size=ego.shape + (cfg.model.lidar_channels,)), 0.0).astype(dtype)
    labels = rng.integers(0, cfg.world.num_classes, size=cfg.grid.labels().shape).astype(np.uint8)
    scene = T.Scene(al.SceneTensors(cams, lid, valid), labels, seed)
    negatives = T.scene_negatives(geom, T.alignment_config(cfg), derive_seed(seed, 4))
    return Instance(cfg, geom, params, scene, negatives)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f, params: Params, key: str, h: float = FD_STEP) -> np.ndarray:
    base = params[key]
    g = np.zeros(base.shape)
    flat = g.reshape(-1)
    for i in range(base.size):
        saved = base.flat[i]
        base.flat[i] = saved + h
        fp = f(params)
        base.flat[i] = saved - h
        fm = f(params)
        base.flat[i] = saved
        flat[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class GradCheckRow:
    instance: int
    path: str
    param: str
    size: int
    max_rel_error: float
    max_abs_grad: float


def _check(inst_id, path, loss_fn, grads, params, keys, rows):
    for k in keys:
        num = numeric_gradient(loss_fn, params, k)
        ana = np.asarray(grads.get(k, np.zeros_like(num)))
        rows.append(GradCheckRow(inst_id, path, k, int(num.size), float(relative_error(ana, num).max()),
                                 float(np.abs(num).max())))


def check_alignment(seed: int, inst_id: int = 0) -> list[GradCheckRow]:
    inst = random_instance(seed)
    acfg = T.alignment_config(inst.cfg)

    def f(p):
        return al.loss_and_gradients(inst.scene.tensors, p, inst.geom, inst.negatives, acfg, with_grads=False)[0]

    _, grads = al.loss_and_gradients(inst.scene.tensors, inst.params, inst.geom, inst.negatives, acfg)
    keys = ["camera.W", "camera.b", "depth.W", "depth.b", "lidar.W", "lidar.b", "log_tau"]
    rows: list[GradCheckRow] = []
    _check(inst_id, "alignment", f, grads, inst.params, keys, rows)
    return rows


def check_segmentation(seed: int, inst_id: int = 0, modality: str = "both") -> list[GradCheckRow]:
    inst = random_instance(seed)
    inst.cfg.train.focal_gamma = 2.0

    def f(p):
        return T.segmentation_loss_and_gradients(p, inst.scene, inst.geom, inst.cfg, modality=modality,
                                                 with_grads=False)[0]

    _, grads = T.segmentation_loss_and_gradients(inst.params, inst.scene, inst.geom, inst.cfg, modality=modality)
    skip = {"log_tau"}
    if modality == "camera_only":
        skip |= {"lidar.W", "lidar.b"}
    if modality == "lidar_only":
        skip |= {"camera.W", "camera.b", "depth.W", "depth.b"}
    keys = [k for k in inst.params if k not in skip]
    rows: list[GradCheckRow] = []
    _check(inst_id, f"segmentation:{modality}", f, grads, inst.params, keys, rows)
    return rows


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]
    seconds: float

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.rows) if self.rows else float("nan")

    def instances(self, path_prefix: str = "") -> int:
        return len({r.instance for r in self.rows if r.path.startswith(path_prefix)})


def run_suite(seed: int, n_alignment: int = 10, n_segmentation: int = 2) -> GradCheckReport:
    t0 = time.perf_counter()
    rows: list[GradCheckRow] = []
    for i in range(n_alignment):
        rows += check_alignment(derive_seed(seed, i), i)
    modalities = ("both", "camera_only", "lidar_only")
    for j in range(n_segmentation):
        rows += check_segmentation(derive_seed(seed, 1000 + j), n_alignment + j, modalities[j % 3])
    return GradCheckReport(rows, time.perf_counter() - t0)
