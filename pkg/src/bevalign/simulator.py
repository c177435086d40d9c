"""Procedural planar worlds and a calibrated camera + lidar rig that observes them.

The world is the ground plane ``y = 0`` painted with class labels, plus a few
axis-aligned boxes. Cameras return per-pixel class embeddings corrupted by
noise. The lidar returns points whose intensity depends on the surface class.
Everything is a deterministic function of the seeds passed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import BevGridSpec, CameraIntrinsics, Se3Pose, compose, rot_y, transform_points
from .lifting import ImageFeatureMap
from .pillars import PointCloud

CLASS_NAMES = ("carpark", "walkway", "lane", "drivable", "stop_line", "crossing")


def class_names(k: int) -> list[str]:
    return [CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class{i}" for i in range(k)]


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class WorldParams:
    extent: float = 64.0
    resolution: float = 0.125
    num_classes: int = 6
    obstacle_density: float = 0.05  # boxes per 100 m^2
    feature_dim: int = 16
    nuisance_channels: int = 4
    embedding_seed: int = 0
    feature_noise: float = 1.0
    intensity_noise: float = 0.05

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("need at least two classes")
        if self.extent <= 0 or self.resolution <= 0:
            raise ValidationError("extent and resolution must be positive")
        if not 0 <= self.nuisance_channels < self.feature_dim:
            raise ValidationError("nuisance channels must leave at least one informative channel")
        if self.obstacle_density < 0 or self.feature_noise < 0 or self.intensity_noise < 0:
            raise ValidationError("densities and noise levels must be non-negative")


@dataclass(frozen=True)
class Obstacle:
    x: float
    z: float
    size_x: float
    size_z: float
    height: float
    cls: int

    def bounds(self):
        return (self.x - self.size_x / 2, 0.0, self.z - self.size_z / 2), \
               (self.x + self.size_x / 2, self.height, self.z + self.size_z / 2)


@dataclass(frozen=True)
class ClassAppearance:
    """Dataset-wide look of each class: camera embedding, sky token, lidar reflectivity."""

    embeddings: np.ndarray  # (K, C)
    sky: np.ndarray  # (C,)
    reflectivity: np.ndarray  # (K,)

    @classmethod
    def from_params(cls, p: WorldParams) -> "ClassAppearance":
        rng = np.random.default_rng(p.embedding_seed)
        informative = p.feature_dim - p.nuisance_channels
        emb = np.zeros((p.num_classes, p.feature_dim))
        emb[:, :informative] = rng.normal(size=(p.num_classes, informative))
        sky = np.zeros(p.feature_dim)
        sky[:informative] = rng.normal(size=informative)
        refl = rng.permutation(np.linspace(0.1, 0.9, p.num_classes))
        return cls(emb, sky, refl)


@dataclass(frozen=True, eq=False)
class WorldMap:
    """Labels are indexed ``[ix, iz]``; texel ``i`` starts at ``-extent/2 + i*resolution``."""

    extent: float
    resolution: float
    labels: np.ndarray
    appearance: ClassAppearance
    obstacles: tuple[Obstacle, ...] = ()

    @property
    def num_classes(self) -> int:
        return self.appearance.embeddings.shape[0]

    @property
    def origin(self) -> float:
        return -self.extent / 2

    def label_at(self, x, z, default: int = 0) -> np.ndarray:
        n = self.labels.shape[0]
        ix = np.floor((np.asarray(x) - self.origin) / self.resolution).astype(np.int64)
        iz = np.floor((np.asarray(z) - self.origin) / self.resolution).astype(np.int64)
        inb = (ix >= 0) & (ix < n) & (iz >= 0) & (iz < n)
        out = np.full(ix.shape, default, dtype=np.int64)
        out[inb] = self.labels[ix[inb], iz[inb]]
        return out


def generate_world(seed: int, params: WorldParams = WorldParams(), clear_radius: float = 5.0) -> WorldMap:
    """Roads, arcs and class patches on a square world, plus scattered boxes."""
    rng = np.random.default_rng(seed)
    E, res, K = params.extent, params.resolution, params.num_classes
    n = int(round(E / res))
    c = -E / 2 + (np.arange(n) + 0.5) * res
    X, Z = np.meshgrid(c, c, indexing="ij")
    labels = np.zeros((n, n), dtype=np.uint8)

    def stripe(cls, width):
        th = rng.uniform(0, math.pi)
        off = rng.uniform(-E / 4, E / 4)
        labels[np.abs(X * math.cos(th) + Z * math.sin(th) - off) < width / 2] = cls

    def arc(cls, width):
        cx, cz = rng.uniform(-E / 3, E / 3, size=2)
        r = rng.uniform(8, 20)
        labels[np.abs(np.hypot(X - cx, Z - cz) - r) < width / 2] = cls

    def patch(cls):
        cx, cz = rng.uniform(-E / 2.5, E / 2.5, size=2)
        if rng.random() < 0.5:
            labels[np.hypot(X - cx, Z - cz) < rng.uniform(2.5, 6)] = cls
        else:
            th = rng.uniform(0, math.pi)
            a, b = rng.uniform(3, 10, size=2)
            u = (X - cx) * math.cos(th) + (Z - cz) * math.sin(th)
            v = -(X - cx) * math.sin(th) + (Z - cz) * math.cos(th)
            labels[(np.abs(u) < a / 2) & (np.abs(v) < b / 2)] = cls

    for _ in range(rng.integers(1, 4)):
        stripe(1 % K, rng.uniform(4, 8))
    if K > 2:
        for _ in range(rng.integers(1, 3)):
            arc(2, rng.uniform(3, 6))
    jobs = [cls for cls in range(3, K) for _ in range(rng.integers(2, 5))]
    for cls in rng.permutation(np.array(jobs, dtype=np.int64)):
        patch(int(cls))
    for _ in range(20):
        frac = np.bincount(labels.reshape(-1), minlength=K) / labels.size
        short = np.flatnonzero(frac < 0.012)
        if short.size == 0:
            break
        for cls in short:
            patch(int(cls))

    obstacles = []
    count = rng.poisson(params.obstacle_density * E * E / 100.0) if params.obstacle_density > 0 else 0
    while len(obstacles) < count:
        x, z = rng.uniform(-E / 2 + 2, E / 2 - 2, size=2)
        if math.hypot(x, z) < clear_radius + 2:
            continue
        ob = Obstacle(float(x), float(z), float(rng.uniform(1, 3)), float(rng.uniform(1, 3)),
                      float(rng.uniform(0.5, 2.5)), int(rng.integers(0, K)))
        obstacles.append(ob)
        lo, hi = ob.bounds()
        labels[(X >= lo[0]) & (X < hi[0]) & (Z >= lo[2]) & (Z < hi[2])] = ob.cls
    return WorldMap(E, res, labels, ClassAppearance.from_params(params), tuple(obstacles))


def raycast(world: WorldMap, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit parameter ``t`` along ``origin + t*dir`` and the hit class.

    Misses give ``t = inf`` and class -1.
    """
    origins = np.broadcast_to(origins, dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dirs[:, 1] < 0, -origins[:, 1] / dirs[:, 1], np.inf)
    tg = np.where(tg > 0, tg, np.inf)
    best = tg
    hit_box = np.full(len(dirs), -1, dtype=np.int64)
    for k, ob in enumerate(world.obstacles):
        lo, hi = (np.array(b) for b in ob.bounds())
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origins) / dirs
            t2 = (hi - origins) / dirs
        tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
        # rays parallel to a slab: inside the slab passes, outside misses
        par = dirs == 0
        inside = (origins >= lo) & (origins <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
        t_in = tmin.max(axis=1)
        t_out = tmax.min(axis=1)
        hit = (t_in <= t_out) & (t_in > 0) & (t_in < best)
        best = np.where(hit, t_in, best)
        hit_box = np.where(hit, k, hit_box)
    cls = np.full(len(dirs), -1, dtype=np.int64)
    ground = np.isfinite(best) & (hit_box < 0)
    pts = origins + np.where(np.isfinite(best), best, 0.0)[:, None] * dirs
    cls[ground] = world.label_at(pts[ground, 0], pts[ground, 2])
    if world.obstacles:
        box_cls = np.array([ob.cls for ob in world.obstacles])
        cls[hit_box >= 0] = box_cls[hit_box[hit_box >= 0]]
    return best, cls


@dataclass(frozen=True)
class CameraNoise:
    feature_noise: float = 1.0
    max_depth: float = 80.0


def render_camera(world: WorldMap, world_from_cam: Se3Pose, K: CameraIntrinsics,
                  noise: CameraNoise = CameraNoise(), rng=None, camera_id: int = 0):
    """Ray-cast every pixel center; returns the feature map and a z-depth map (inf for sky)."""
    rng = np.random.default_rng(0) if rng is None else rng
    u = np.arange(K.width) + 0.5
    v = np.arange(K.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ world_from_cam.rotation.T
    t, cls = raycast(world, world_from_cam.translation[None, :], dirs)
    sky = ~np.isfinite(t) | (t > noise.max_depth)
    app = world.appearance
    feats = np.where(sky[:, None], app.sky[None, :], app.embeddings[np.maximum(cls, 0)])
    if noise.feature_noise > 0:
        feats = feats + rng.normal(0, noise.feature_noise, feats.shape)
    depth = np.where(sky, np.inf, t)
    shape = (K.height, K.width)
    return ImageFeatureMap(feats.reshape(shape + (-1,)), camera_id), depth.reshape(shape)


@dataclass(frozen=True)
class LidarParams:
    height: float = 1.8
    ring_min_range: float = 1.5
    ring_max_range: float = 18.0
    ground_beams: int = 40
    upper_beams: int = 8
    upper_min_deg: float = -4.0
    upper_max_deg: float = 6.0
    azimuth_steps: int = 360
    max_range: float = 30.0
    range_noise: float = 0.0

    def elevations(self) -> np.ndarray:
        rings = np.linspace(self.ring_min_range, self.ring_max_range, self.ground_beams)
        ground = -np.arctan2(self.height, rings)
        upper = np.radians(np.linspace(self.upper_min_deg, self.upper_max_deg, self.upper_beams))
        return np.concatenate([ground, upper])


def beam_directions(params: LidarParams) -> np.ndarray:
    el = params.elevations()
    az = np.arange(params.azimuth_steps) * (2 * math.pi / params.azimuth_steps)
    E, A = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.sin(A) * np.cos(E), np.sin(E), np.cos(A) * np.cos(E)], axis=-1).reshape(-1, 3)


def sample_lidar(world: WorldMap, world_from_lidar: Se3Pose, beams: LidarParams = LidarParams(),
                 seed: int = 0, intensity_noise: float = 0.05) -> PointCloud:
    """Cast every beam; returns points in the lidar frame with class-dependent intensity."""
    rng = np.random.default_rng(seed)
    d_l = beam_directions(beams)
    t, cls = raycast(world, world_from_lidar.translation[None, :], d_l @ world_from_lidar.rotation.T)
    keep = np.isfinite(t) & (t <= beams.max_range)
    t, cls, d_l = t[keep], cls[keep], d_l[keep]
    if beams.range_noise > 0:
        t = t + rng.normal(0, beams.range_noise, t.shape)
    inten = world.appearance.reflectivity[cls]
    if intensity_noise > 0:
        inten = np.clip(inten + rng.normal(0, intensity_noise, inten.shape), 0.0, 1.0)
    return PointCloud(t[:, None] * d_l, inten, "lidar")


def ground_truth_bev(world: WorldMap, world_from_ego: Se3Pose, grid: BevGridSpec) -> np.ndarray:
    """Majority class of the world texels under each cell (ties go to the lowest id)."""
    s = max(1, int(math.ceil(grid.cell_size / world.resolution - 1e-9)))
    sub = (np.arange(s) + 0.5) / s
    ix = np.arange(grid.cells_x)[:, None] + sub[None, :]
    iz = np.arange(grid.cells_z)[:, None] + sub[None, :]
    xs = grid.x_min + ix.reshape(-1) * grid.cell_size
    zs = grid.z_min + iz.reshape(-1) * grid.cell_size
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    pts = np.stack([X, np.zeros_like(X), Z], axis=-1)
    pw = transform_points(world_from_ego, pts)
    lab = world.label_at(pw[..., 0], pw[..., 2])
    lab = lab.reshape(grid.cells_x, s, grid.cells_z, s).transpose(0, 2, 1, 3).reshape(grid.n_cells, s * s)
    K = world.num_classes
    counts = np.zeros((grid.n_cells, K), dtype=np.int64)
    for k in range(K):
        counts[:, k] = (lab == k).sum(axis=1)
    return counts.argmax(axis=1).astype(np.uint8).reshape(grid.shape)


@dataclass(frozen=True)
class RigParams:
    num_cameras: int = 6
    feat_h: int = 16
    feat_w: int = 24
    hfov_deg: float = 70.0
    pitch_deg: float = 12.0
    camera_height: float = 1.6
    mount_radius: float = 0.3


@dataclass(frozen=True, eq=False)
class SensorRig:
    """Camera intrinsics and ego-from-camera poses; the lidar sits at the ego origin."""

    intrinsics: tuple[CameraIntrinsics, ...]
    ego_from_cam: tuple[Se3Pose, ...]
    lidar: LidarParams = field(default_factory=LidarParams)

    def __post_init__(self):
        if len(self.intrinsics) < 1 or len(self.intrinsics) != len(self.ego_from_cam):
            raise ValidationError("rig needs one intrinsics entry per camera and at least one camera")

    @property
    def num_cameras(self) -> int:
        return len(self.intrinsics)

    def cameras(self):
        return list(zip(self.intrinsics, self.ego_from_cam))


def camera_mount(yaw: float, pitch: float, position) -> Se3Pose:
    """Ego-from-camera pose for an optical axis at ``yaw`` tilted down by ``pitch``."""
    c, s = math.cos(pitch), math.sin(pitch)
    planar_from_cam = np.array([[-1.0, 0.0, 0.0], [0.0, -c, -s], [0.0, -s, c]])
    return Se3Pose(rot_y(yaw) @ planar_from_cam, np.asarray(position, dtype=np.float64))


def default_rig(params: RigParams = RigParams(), lidar: LidarParams = LidarParams()) -> SensorRig:
    """Cameras evenly spaced in yaw, together covering 360 degrees."""
    K = CameraIntrinsics.from_fov(params.feat_w, params.feat_h, params.hfov_deg)
    poses = []
    for i in range(params.num_cameras):
        yaw = 2 * math.pi * i / params.num_cameras
        pos = rot_y(yaw) @ np.array([0.0, params.camera_height - lidar.height, params.mount_radius])
        poses.append(camera_mount(yaw, math.radians(params.pitch_deg), pos))
    return SensorRig(tuple([K] * params.num_cameras), tuple(poses), lidar)


@dataclass(eq=False)
class SceneSample:
    camera_features: list[np.ndarray]
    depth_maps: list[np.ndarray]
    cloud: PointCloud
    world_from_ego: Se3Pose
    labels: np.ndarray  # ground truth on the label grid
    seed: int


def generate_scene(seed: int, world_params: WorldParams, rig: SensorRig, label_grid: BevGridSpec,
                   max_depth: float = 80.0, ego_jitter: float = 2.0, world: WorldMap | None = None) -> SceneSample:
    rng = np.random.default_rng(seed)
    if world is None:
        world = generate_world(derive_seed(seed, 1), world_params)
    x, z = rng.uniform(-ego_jitter, ego_jitter, size=2)
    world_from_ego = Se3Pose.planar(float(x), float(z), float(rng.uniform(0, 2 * math.pi)), y=rig.lidar.height)
    noise = CameraNoise(world_params.feature_noise, max_depth)
    feats, depths = [], []
    for i, (K, T) in enumerate(rig.cameras()):
        f, d = render_camera(world, compose(world_from_ego, T), K, noise, rng, i)
        feats.append(f.features)
        depths.append(d)
    cloud = sample_lidar(world, world_from_ego, rig.lidar, derive_seed(seed, 2), world_params.intensity_noise)
    labels = ground_truth_bev(world, world_from_ego, label_grid)
    return SceneSample(feats, depths, cloud, world_from_ego, labels, seed)
