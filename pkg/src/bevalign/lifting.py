"""Depth-distribution lifting of image features into a BEV grid.

Every feature pixel is spread over ``L`` depth bins along its ray. The mapping
(pixel, bin) -> BEV cell depends only on calibration, so it is computed once
as a :class:`CellAssociationTable` and reused for every frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .geometry import (
    BevGridSpec,
    BevMap,
    CameraIntrinsics,
    DepthBins,
    Se3Pose,
    flat_cell_index,
    transform_points,
    unproject_grid,
)


@dataclass(frozen=True, eq=False)
class ImageFeatureMap:
    features: np.ndarray  # (H', W', C_c)
    camera_id: int = 0

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 3 or f.shape[0] < 1 or f.shape[1] < 1:
            raise ValidationError("image features must be (H', W', C) with H', W' >= 1")
        if not np.all(np.isfinite(f)):
            raise ValidationError("image features must be finite")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True, eq=False)
class DepthDistribution:
    probs: np.ndarray  # (H', W', L)

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 3:
            raise ValidationError("depth probabilities must be (H', W', L)")
        if np.any(p < 0) or np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6:
            raise ValidationError("each pixel's depth distribution must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True, eq=False)
class FrustumTemplate:
    points_cam: np.ndarray  # (H', W', L, 3)
    bins: DepthBins

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.points_cam.shape[:3]


@dataclass(frozen=True, eq=False)
class CellAssociationTable:
    """Target cell of every (h, w, l) plus a cell-sorted entry list.

    ``cell_index`` holds -1 for points outside the grid. The ``entry_*`` arrays
    list only in-grid entries, sorted by target cell and, within a cell, by
    flat (h, w, l) order; ``cell_ptr`` is the CSR row pointer over cells.
    """

    cell_index: np.ndarray  # (H', W', L) int64
    entry_cell: np.ndarray
    entry_pixel: np.ndarray  # flat h * W' + w
    entry_bin: np.ndarray
    cell_ptr: np.ndarray  # (n_cells + 1,)
    grid: BevGridSpec

    @property
    def frustum_shape(self) -> tuple[int, int, int]:
        return self.cell_index.shape

    @property
    def n_entries(self) -> int:
        return int(self.entry_cell.size)

    @property
    def n_sentinel(self) -> int:
        return int(self.cell_index.size - self.entry_cell.size)

    @property
    def covered_cells(self) -> np.ndarray:
        """Boolean (cells_x, cells_z) mask of cells with at least one association."""
        return (np.diff(self.cell_ptr) > 0).reshape(self.grid.shape)

    def pooling_matrix(self, probs_flat: np.ndarray) -> sp.csr_matrix:
        """Sparse (n_cells, n_pixels) matrix with the depth weight of each entry."""
        h, w, L = self.frustum_shape
        data = probs_flat.reshape(-1)[self.entry_pixel * L + self.entry_bin]
        return sp.csr_matrix((data, self.entry_pixel, self.cell_ptr), shape=(self.grid.n_cells, h * w))


def build_frustum(K: CameraIntrinsics, feat_shape: tuple[int, int], bins: DepthBins,
                  stride: int = 1) -> FrustumTemplate:
    """Camera-frame points at every feature pixel center and depth-bin center."""
    hh, ww = feat_shape
    u = (np.arange(ww) + 0.5) * stride
    v = (np.arange(hh) + 0.5) * stride
    d = bins.centers()
    pts = unproject_grid(K, u[None, :, None], v[:, None, None], d[None, None, :])
    return FrustumTemplate(pts, bins)


def precompute_associations(frustum: FrustumTemplate, T_ref_from_cam: Se3Pose,
                            grid: BevGridSpec) -> CellAssociationTable:
    pts = transform_points(T_ref_from_cam, frustum.points_cam)
    cell = flat_cell_index(grid, pts)
    flat = cell.reshape(-1)
    keep = np.flatnonzero(flat >= 0)
    order = keep[np.argsort(flat[keep], kind="stable")]
    L = frustum.shape[2]
    entry_cell = flat[order]
    ptr = np.zeros(grid.n_cells + 1, dtype=np.int64)
    np.add.at(ptr, entry_cell + 1, 1)
    ptr = np.cumsum(ptr)
    for a in (cell, entry_cell, order, ptr):
        a.setflags(write=False)
    return CellAssociationTable(cell, entry_cell, order // L, order % L, ptr, grid)


def _check_shapes(table: CellAssociationTable, probs: np.ndarray, values: np.ndarray):
    h, w, L = table.frustum_shape
    if probs.shape[:2] != (h, w) or probs.shape[-1] != L:
        raise ValidationError(f"depth shape {probs.shape} does not match table {(h, w, L)}")
    if values.shape[:2] != (h, w):
        raise ValidationError(f"feature shape {values.shape} does not match table {(h, w)}")


def splat(table: CellAssociationTable, probs: np.ndarray, values: np.ndarray,
          exact: bool = False) -> np.ndarray:
    """Cell sums of ``probs[h,w,l] * values[h,w,:]``; returns (n_cells, D).

    ``exact`` accumulates entry by entry in table order, which reproduces a
    sequential loop bit for bit. The default path is a sparse product over the
    same layout.
    """
    _check_shapes(table, probs, values)
    h, w, L = table.frustum_shape
    vals = values.reshape(h * w, -1)
    if exact:
        out = np.zeros((table.grid.n_cells, vals.shape[1]), dtype=np.result_type(probs, values))
        wts = probs.reshape(-1)[table.entry_pixel * L + table.entry_bin]
        np.add.at(out, table.entry_cell, wts[:, None] * vals[table.entry_pixel])
        return out
    return np.asarray(table.pooling_matrix(probs) @ vals)


def splat_backward(table: CellAssociationTable, probs: np.ndarray, values: np.ndarray,
                   grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`splat` w.r.t. ``probs`` and ``values``."""
    h, w, L = table.frustum_shape
    vals = values.reshape(h * w, -1)
    A = table.pooling_matrix(probs)
    g_vals = np.asarray(A.T @ grad_out).reshape(values.shape)
    g_probs = np.zeros(h * w * L, dtype=grad_out.dtype)
    g_probs[table.entry_pixel * L + table.entry_bin] = np.einsum(
        "ed,ed->e", vals[table.entry_pixel], grad_out[table.entry_cell])
    return g_probs.reshape(probs.shape), g_vals


def lift_and_pool(feat: ImageFeatureMap, depth: DepthDistribution, table: CellAssociationTable,
                  grid: BevGridSpec, exact: bool = False) -> BevMap:
    if not grid.same_layout(table.grid):
        raise ValidationError("association table was built for a different grid")
    out = splat(table, depth.probs, feat.features, exact=exact)
    return BevMap(grid, out.reshape(grid.shape + (-1,)), table.covered_cells)


def merge_camera_bevs(maps: list[BevMap]) -> BevMap:
    """Cell-wise sum of camera BEV maps; validity is the union."""
    if not maps:
        raise ValidationError("need at least one map")
    first = maps[0]
    for m in maps[1:]:
        if not m.grid.same_layout(first.grid) or m.features.shape != first.features.shape:
            raise ValidationError("camera BEV maps must share one grid")
    feats = first.features.copy()
    valid = first.valid_mask.copy()
    for m in maps[1:]:
        feats += m.features
        valid |= m.valid_mask
    return BevMap(first.grid, feats, valid)

