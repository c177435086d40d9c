"""Rigid transforms, pinhole cameras and BEV grid indexing.

Frames follow a y-up convention: the BEV lives on the xz plane and yaw is a
rotation about +y. A yaw of 0 faces +z. Camera optical frames are the usual
x-right, y-down, z-forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, ValidationError

_ORTHO_TOL = 1e-9


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Se3Pose:
    """Rigid transform ``x -> R x + t`` (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if r.shape != (3, 3) or not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValidationError("pose needs a finite 3x3 rotation and 3-vector translation")
        if np.abs(r @ r.T - np.eye(3)).max() > _ORTHO_TOL:
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValidationError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls()

    @classmethod
    def planar(cls, x: float, z: float, yaw: float, y: float = 0.0) -> "Se3Pose":
        """Yaw about +y followed by a translation in the ground plane."""
        return cls(rot_y(yaw), np.array([x, y, z], dtype=np.float64))

    def planar_params(self) -> tuple[float, float, float]:
        """(x, z, yaw) of the pose, ignoring any tilt."""
        yaw = math.atan2(self.rotation[0, 2], self.rotation[2, 2])
        return float(self.translation[0]), float(self.translation[2]), yaw

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Se3Pose") -> "Se3Pose":
        return compose(self, other)

    def __repr__(self):
        x, z, yaw = self.planar_params()
        return f"Se3Pose(x={x:.4g}, y={self.translation[1]:.4g}, z={z:.4g}, yaw={math.degrees(yaw):.4g}deg)"


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def compose(a: Se3Pose, b: Se3Pose) -> Se3Pose:
    """Pose of ``x -> a(b(x))``."""
    r = a.rotation @ b.rotation
    if np.abs(r @ r.T - np.eye(3)).max() > 1e-12:
        r = _reorthonormalize(r)
    return Se3Pose(r, a.rotation @ b.translation + a.translation)


def invert(p: Se3Pose) -> Se3Pose:
    rt = p.rotation.T
    return Se3Pose(rt, -rt @ p.translation)


def transform_point(T: Se3Pose, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return T.rotation @ p + T.translation


def transform_points(T: Se3Pose, pts) -> np.ndarray:
    """Vectorised ``transform_point`` over the last axis of ``pts`` (..., 3)."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ T.rotation.T + T.translation


def planar_distance(a: Se3Pose, b: Se3Pose, yaw_weight: float = 1.0) -> float:
    """Translation distance in the xz plane plus weighted absolute yaw gap."""
    ax, az, ay = a.planar_params()
    bx, bz, by = b.planar_params()
    dyaw = (ay - by + math.pi) % (2 * math.pi) - math.pi
    return math.hypot(ax - bx, az - bz) + yaw_weight * abs(dyaw)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height)


def project(K: CameraIntrinsics, p_cam) -> tuple[float, float, float]:
    x, y, z = (float(v) for v in p_cam)
    if not z > 0:
        raise BehindCameraError(f"point has depth {z} <= 0")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def unproject(K: CameraIntrinsics, u: float, v: float, d: float) -> np.ndarray:
    if not d > 0:
        raise ValidationError(f"depth must be positive, got {d}")
    return np.array([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d])


def unproject_grid(K: CameraIntrinsics, u, v, d) -> np.ndarray:
    """Broadcasting ``unproject``; returns (..., 3)."""
    u, v, d = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(d, float))
    if np.any(d <= 0):
        raise ValidationError("depth must be positive")
    return np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], axis=-1)


@dataclass(frozen=True)
class BevGridSpec:
    """Regular grid on the xz plane. Cell ``i`` covers ``[x_min + i*c, x_min + (i+1)*c)``."""

    x_min: float
    x_max: float
    z_min: float
    z_max: float
    cell_size: float
    feature_dim: int = 1

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.z_max > self.z_min):
            raise ValidationError("grid extents must be positive")
        if not self.cell_size > 0:
            raise ValidationError("cell_size must be positive")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be >= 1")
        for lo, hi in ((self.x_min, self.x_max), (self.z_min, self.z_max)):
            n = (hi - lo) / self.cell_size
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValidationError(f"extent {hi - lo} is not a multiple of cell_size {self.cell_size}")

    @property
    def cells_x(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_size))

    @property
    def cells_z(self) -> int:
        return int(round((self.z_max - self.z_min) / self.cell_size))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells_x, self.cells_z

    @property
    def n_cells(self) -> int:
        return self.cells_x * self.cells_z

    def with_dim(self, feature_dim: int) -> "BevGridSpec":
        return BevGridSpec(self.x_min, self.x_max, self.z_min, self.z_max, self.cell_size, feature_dim)

    def refined(self, factor: int) -> "BevGridSpec":
        return BevGridSpec(self.x_min, self.x_max, self.z_min, self.z_max,
                           self.cell_size / factor, self.feature_dim)

    def same_layout(self, other: "BevGridSpec") -> bool:
        return (self.x_min, self.x_max, self.z_min, self.z_max, self.cell_size) == (
            other.x_min, other.x_max, other.z_min, other.z_max, other.cell_size)

    def cell_centers(self) -> np.ndarray:
        """(cells_x, cells_z, 2) array of (x, z) centers."""
        xs = self.x_min + (np.arange(self.cells_x) + 0.5) * self.cell_size
        zs = self.z_min + (np.arange(self.cells_z) + 0.5) * self.cell_size
        gx, gz = np.meshgrid(xs, zs, indexing="ij")
        return np.stack([gx, gz], axis=-1)


def world_to_cell(grid: BevGridSpec, p):
    """Continuous (cell_x, cell_z) of ``p`` or ``None`` when outside the grid."""
    x, z = float(p[0]), float(p[2])
    if not (grid.x_min <= x < grid.x_max and grid.z_min <= z < grid.z_max):
        return None
    return (x - grid.x_min) / grid.cell_size, (z - grid.z_min) / grid.cell_size


def world_to_cells(grid: BevGridSpec, pts) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``world_to_cell``: continuous coords (..., 2) and an in-bounds mask."""
    pts = np.asarray(pts, dtype=np.float64)
    x, z = pts[..., 0], pts[..., 2]
    inb = (x >= grid.x_min) & (x < grid.x_max) & (z >= grid.z_min) & (z < grid.z_max)
    coords = np.stack([(x - grid.x_min) / grid.cell_size, (z - grid.z_min) / grid.cell_size], axis=-1)
    return coords, inb


def flat_cell_index(grid: BevGridSpec, pts) -> np.ndarray:
    """Row-major flat cell index ``ix * cells_z + iz``; -1 for out-of-grid points."""
    coords, inb = world_to_cells(grid, pts)
    ix = np.floor(coords[..., 0]).astype(np.int64)
    iz = np.floor(coords[..., 1]).astype(np.int64)
    # guard the half-open upper edge against rounding in the division
    inb &= (ix >= 0) & (ix < grid.cells_x) & (iz >= 0) & (iz < grid.cells_z)
    return np.where(inb, ix * grid.cells_z + iz, -1)


@dataclass(frozen=True)
class DepthBins:
    d_min: float = 1.0
    d_max: float = 80.0
    step: float = 0.5

    def __post_init__(self):
        if not self.d_min > 0:
            raise ValidationError("d_min must be positive")
        if not (self.step > 0 and self.d_max > self.d_min):
            raise ValidationError("need d_max > d_min and step > 0")
        n = (self.d_max - self.d_min) / self.step
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValidationError("depth range is not a multiple of step")

    @property
    def L(self) -> int:
        return int(round((self.d_max - self.d_min) / self.step))

    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.L) + 0.5) * self.step


@dataclass(frozen=True, eq=False)
class BevMap:
    """Dense BEV features of shape (cells_x, cells_z, D) plus a per-cell validity mask."""

    grid: BevGridSpec
    features: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features)
        m = np.asarray(self.valid_mask, dtype=bool)
        if f.ndim != 3 or f.shape[:2] != self.grid.shape:
            raise ValidationError(f"features shape {f.shape} does not match grid {self.grid.shape}")
        if m.shape != f.shape[:2]:
            raise ValidationError("valid_mask shape must match the feature grid")
        if not np.all(np.isfinite(f)):
            raise ValidationError("BEV features must be finite")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "valid_mask", m)

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @classmethod
    def empty(cls, grid: BevGridSpec, dim: int | None = None, dtype=np.float32) -> "BevMap":
        d = grid.feature_dim if dim is None else dim
        return cls(grid, np.zeros(grid.shape + (d,), dtype=dtype), np.zeros(grid.shape, dtype=bool))
