"""Lidar voxelisation and vertical pooling into a raw pillar BEV map."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import BevGridSpec, BevMap

VOXEL_CHANNELS = ("count", "mean_intensity", "mean_height", "max_height")
INTENSITY_BINS = 8
PILLAR_CHANNELS = ("count", "occupied_voxels", "mean_height", "max_height", "mean_intensity") + tuple(
    f"intensity_hist{b}" for b in range(INTENSITY_BINS))

DEFAULT_VOXEL_SIZE = 0.1


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3), lidar frame
    intensity: np.ndarray | None = None
    frame_id: str = "lidar"

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValidationError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.intensity is not None:
            i = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if i.shape[0] != p.shape[0] or not np.all(np.isfinite(i)):
                raise ValidationError("intensity must be finite with one value per point")
            object.__setattr__(self, "intensity", i)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class VoxelBounds:
    x: tuple[float, float]
    y: tuple[float, float]
    z: tuple[float, float]


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Sparse storage of an (L_x, L_z, L_y, 4) voxel feature volume.

    Only occupied voxels are kept: ``coords`` holds their (ix, iz, iy) indices
    in ascending flat order and ``values`` their channels (see
    ``VOXEL_CHANNELS``). :meth:`dense` materialises the full array.
    """

    resolution: float
    bounds: VoxelBounds
    coords: np.ndarray
    values: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        r = self.resolution
        return tuple(int(round((hi - lo) / r)) for lo, hi in (self.bounds.x, self.bounds.z, self.bounds.y))

    @property
    def n_occupied(self) -> int:
        return int(self.coords.shape[0])

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dims + (len(VOXEL_CHANNELS),))
        ix, iz, iy = self.coords.T
        out[ix, iz, iy] = self.values
        return out


def _check_extent(lo, hi, res, name):
    n = (hi - lo) / res
    if not hi > lo or abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ValidationError(f"{name} extent {hi - lo} is not a positive multiple of {res}")


def voxelize(cloud: PointCloud, resolution: float = DEFAULT_VOXEL_SIZE,
             bounds: VoxelBounds | None = None) -> VoxelGrid:
    """Bin points into voxels; channels are count, mean intensity, mean and max height."""
    if not resolution > 0:
        raise ValidationError("voxel resolution must be positive")
    if bounds is None:
        raise ValidationError("voxel bounds are required")
    for name, (lo, hi) in zip("xyz", (bounds.x, bounds.y, bounds.z)):
        _check_extent(lo, hi, resolution, name)
    grid = VoxelGrid(resolution, bounds, np.zeros((0, 3), np.int64), np.zeros((0, 4)))
    nx, nz, ny = grid.dims
    p = cloud.points
    idx = np.floor((p - np.array([bounds.x[0], bounds.y[0], bounds.z[0]])) / resolution).astype(np.int64)
    inb = ((idx[:, 0] >= 0) & (idx[:, 0] < nx) & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
           & (idx[:, 2] >= 0) & (idx[:, 2] < nz))
    if not inb.any():
        return grid
    idx, p = idx[inb], p[inb]
    inten = cloud.intensity[inb] if cloud.intensity is not None else np.zeros(len(p))
    flat = (idx[:, 0] * nz + idx[:, 2]) * ny + idx[:, 1]
    uniq, inv = np.unique(flat, return_inverse=True)
    count = np.bincount(inv).astype(np.float64)
    mean_i = np.bincount(inv, weights=inten) / count
    mean_h = np.bincount(inv, weights=p[:, 1]) / count
    max_h = np.full(len(uniq), -np.inf)
    np.maximum.at(max_h, inv, p[:, 1])
    coords = np.stack([uniq // (nz * ny), (uniq // ny) % nz, uniq % ny], axis=1)
    return VoxelGrid(resolution, bounds, coords, np.stack([count, mean_i, mean_h, max_h], axis=1))


def pool_vertical(grid: VoxelGrid, bev_spec: BevGridSpec) -> BevMap:
    """Collapse voxel columns into BEV pillars.

    Channels follow ``PILLAR_CHANNELS``. Means are point-weighted. The
    histogram channels give the fraction of points whose voxel mean intensity
    falls in each of ``INTENSITY_BINS`` equal bins over [0, 1] (values outside
    are clipped into the end bins). Cells with no points are zero and invalid.
    """
    b = grid.bounds
    if not np.allclose([b.x[0], b.x[1], b.z[0], b.z[1]],
                       [bev_spec.x_min, bev_spec.x_max, bev_spec.z_min, bev_spec.z_max]):
        raise ValidationError("voxel grid and BEV grid horizontal extents differ")
    ratio = bev_spec.cell_size / grid.resolution
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
        raise ValidationError("BEV cell size must be a whole number of voxels")
    ratio = int(round(ratio))
    nch = len(PILLAR_CHANNELS)
    out = np.zeros((bev_spec.n_cells, nch))
    valid = np.zeros(bev_spec.n_cells, dtype=bool)
    if grid.n_occupied:
        ix, iz, _ = grid.coords.T
        cell = (ix // ratio) * bev_spec.cells_z + iz // ratio
        count, mean_i, mean_h, max_h = grid.values.T
        total = np.bincount(cell, weights=count, minlength=bev_spec.n_cells)
        occ = np.bincount(cell, minlength=bev_spec.n_cells).astype(np.float64)
        hsum = np.bincount(cell, weights=count * mean_h, minlength=bev_spec.n_cells)
        isum = np.bincount(cell, weights=count * mean_i, minlength=bev_spec.n_cells)
        hmax = np.full(bev_spec.n_cells, -np.inf)
        np.maximum.at(hmax, cell, max_h)
        valid = total > 0
        safe = np.where(valid, total, 1.0)
        out[:, 0] = total
        out[:, 1] = occ
        out[:, 2] = np.where(valid, hsum / safe, 0.0)
        out[:, 3] = np.where(valid, hmax, 0.0)
        out[:, 4] = np.where(valid, isum / safe, 0.0)
        ib = np.clip(np.floor(mean_i * INTENSITY_BINS).astype(np.int64), 0, INTENSITY_BINS - 1)
        hist = np.bincount(cell * INTENSITY_BINS + ib, weights=count, minlength=bev_spec.n_cells * INTENSITY_BINS)
        out[:, 5:] = hist.reshape(-1, INTENSITY_BINS) / safe[:, None]
    return BevMap(bev_spec.with_dim(nch), out.reshape(bev_spec.shape + (nch,)), valid.reshape(bev_spec.shape))


def write_point_cloud(path, cloud: PointCloud) -> None:
    """Write ``<path>.bin`` (x, y, z, intensity as little-endian float32) and a JSON sidecar."""
    path = Path(path)
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    path.with_suffix(".bin").write_bytes(rec.tobytes())
    header = {"count": len(cloud), "frame_id": cloud.frame_id, "fields": ["x", "y", "z", "intensity"],
              "dtype": "float32", "byte_order": "little"}
    path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True))


def read_point_cloud(path) -> PointCloud:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    rec = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4").reshape(-1, 4)
    if rec.shape[0] != header["count"]:
        raise ValidationError(f"{path}: header count {header['count']} != {rec.shape[0]} records")
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64), header["frame_id"])
