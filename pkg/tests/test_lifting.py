import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevalign.errors import ValidationError
from bevalign.geometry import BevGridSpec, BevMap, CameraIntrinsics, DepthBins, Se3Pose, project, rot_x, unproject
from bevalign.lifting import (
    DepthDistribution, ImageFeatureMap, build_frustum, lift_and_pool, merge_camera_bevs, precompute_associations,
    splat, splat_backward,
)


def naive_splat(points_ref, probs, feats, grid):
    """Sequential triple loop over (h, w, l) in row-major order."""
    H, W, L = probs.shape
    out = np.zeros((grid.cells_x, grid.cells_z, feats.shape[-1]), dtype=np.result_type(probs, feats))
    for h in range(H):
        for w in range(W):
            for l in range(L):
                x, _, z = points_ref[h, w, l]
                cx = math.floor((x - grid.x_min) / grid.cell_size)
                cz = math.floor((z - grid.z_min) / grid.cell_size)
                if 0 <= cx < grid.cells_x and 0 <= cz < grid.cells_z:
                    out[cx, cz] += probs[h, w, l] * feats[h, w]
    return out


def random_case(rng, dtype):
    H, W, L, C = rng.integers(1, 6), rng.integers(1, 7), rng.integers(1, 9), rng.integers(1, 5)
    K = CameraIntrinsics.from_fov(int(W), int(H), rng.uniform(40, 100))
    bins = DepthBins(0.5, 0.5 + 0.7 * L, 0.7)
    T = Se3Pose(rot_x(rng.uniform(-0.4, 0.4)), [rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-3, 1)])
    grid = BevGridSpec(-4, 4, -2, 6, 0.5)
    fr = build_frustum(K, (int(H), int(W)), bins)
    table = precompute_associations(fr, T, grid)
    logits = rng.normal(size=(H, W, L))
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    feats = rng.normal(size=(H, W, C))
    pts = fr.points_cam @ T.rotation.T + T.translation
    return table, probs.astype(dtype), feats.astype(dtype), pts, grid


def test_exact_mode_matches_loop_bit_for_bit_in_float64():
    rng = np.random.default_rng(0)
    for _ in range(100):
        table, probs, feats, pts, grid = random_case(rng, np.float64)
        ref = naive_splat(pts, probs, feats, grid)
        got = splat(table, probs, feats, exact=True).reshape(ref.shape)
        assert np.array_equal(got, ref)


def test_fast_path_matches_loop_in_float32():
    rng = np.random.default_rng(1)
    for _ in range(100):
        table, probs, feats, pts, grid = random_case(rng, np.float32)
        ref = naive_splat(pts, probs.astype(np.float64), feats.astype(np.float64), grid)
        got = splat(table, probs, feats).reshape(ref.shape)
        assert np.abs(got - ref).max() < 1e-6


K1 = CameraIntrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)


def test_single_pixel_single_bin_frustum_point():
    bins = DepthBins(1.0, 3.0, 2.0)
    fr = build_frustum(K1, (1, 1), bins)
    assert fr.shape == (1, 1, 1)
    assert np.allclose(fr.points_cam[0, 0, 0], unproject(K1, 0.5, 0.5, 2.0))


def test_frustum_point_count_and_default_bins():
    K = CameraIntrinsics.from_fov(24, 16, 70)
    fr = build_frustum(K, (16, 24), DepthBins())
    assert fr.points_cam.shape == (16, 24, 158, 3)


def test_two_bins_straddling_a_cell_boundary():
    # optical axis along +z from the origin; bin centres at 1.5 m and 2.5 m
    grid = BevGridSpec(-1, 1, 0, 4, 1.0)
    fr = build_frustum(K1, (1, 1), DepthBins(1.0, 3.0, 1.0))
    t = precompute_associations(fr, Se3Pose.identity(), grid)
    # hand projection: (x, z) = (0, 1.5) -> cell (1, 1); (0, 2.5) -> cell (1, 2)
    assert t.cell_index[0, 0].tolist() == [1 * 4 + 1, 1 * 4 + 2]


def test_all_points_in_grid_gives_no_sentinels():
    K = CameraIntrinsics.from_fov(4, 3, 60)
    fr = build_frustum(K, (3, 4), DepthBins(1, 5, 1))
    t = precompute_associations(fr, Se3Pose.identity(), BevGridSpec(-10, 10, -10, 10, 1.0))
    assert t.n_sentinel == 0 and t.n_entries == 3 * 4 * 4


def test_camera_far_outside_grid_gives_only_sentinels():
    K = CameraIntrinsics.from_fov(4, 3, 60)
    fr = build_frustum(K, (3, 4), DepthBins(1, 5, 1))
    t = precompute_associations(fr, Se3Pose(np.eye(3), [1e4, 0, 0]), BevGridSpec(-10, 10, -10, 10, 1.0))
    assert t.n_entries == 0 and np.all(t.cell_index == -1)


def test_table_rebuild_is_identical():
    K = CameraIntrinsics.from_fov(6, 4, 80)
    fr = build_frustum(K, (4, 6), DepthBins(1, 9, 1))
    T = Se3Pose.planar(0.3, -0.2, 0.4)
    g = BevGridSpec(-6, 6, -6, 6, 1.0)
    a, b = precompute_associations(fr, T, g), precompute_associations(fr, T, g)
    for name in ("cell_index", "entry_cell", "entry_pixel", "entry_bin", "cell_ptr"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def _simple():
    grid = BevGridSpec(-1, 1, 0, 4, 1.0)
    fr = build_frustum(K1, (1, 1), DepthBins(1.0, 3.0, 1.0))
    return grid, precompute_associations(fr, Se3Pose.identity(), grid)


def test_one_hot_depth_lands_in_one_cell():
    grid, t = _simple()
    f = np.array([[[2.0, -1.0]]])
    out = splat(t, np.array([[[0.0, 1.0]]]), f).reshape(2, 4, 2)
    assert np.count_nonzero(np.abs(out).sum(-1)) == 1
    assert out[1, 2].tolist() == [2.0, -1.0]


def test_half_weights_into_one_cell_sum_to_full_feature():
    grid = BevGridSpec(-1, 1, 1, 5, 2.0)  # both bin centres (1.5 m, 2.5 m) fall in [1, 3)
    fr = build_frustum(K1, (1, 1), DepthBins(1.0, 3.0, 1.0))
    t = precompute_associations(fr, Se3Pose.identity(), grid)
    out = splat(t, np.array([[[0.5, 0.5]]]), np.array([[[3.0]]])).reshape(1, 2, 1)
    assert out[0, 0, 0] == 3.0


def test_lift_and_pool_valid_mask_and_grid_guard():
    grid, t = _simple()
    feat = ImageFeatureMap(np.ones((1, 1, 2)))
    depth = DepthDistribution(np.array([[[0.25, 0.75]]]))
    m = lift_and_pool(feat, depth, t, grid)
    assert m.valid_mask.sum() == 2 and m.features.sum() == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        lift_and_pool(feat, depth, t, BevGridSpec(-2, 2, 0, 4, 1.0))


def test_depth_distribution_must_sum_to_one():
    with pytest.raises(ValidationError):
        DepthDistribution(np.array([[[0.5, 0.4]]]))
    with pytest.raises(ValidationError):
        DepthDistribution(np.array([[[1.5, -0.5]]]))


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31 - 1))
def test_splat_is_linear_in_features(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    table, probs, f, _, _ = random_case(rng, np.float64)
    g = rng.normal(size=f.shape)
    lhs = splat(table, probs, alpha * f + beta * g)
    rhs = alpha * splat(table, probs, f) + beta * splat(table, probs, g)
    assert np.allclose(lhs, rhs, atol=1e-10)


@given(st.integers(0, 2 ** 31 - 1))
def test_mass_conservation_per_pixel(seed):
    rng = np.random.default_rng(seed)
    table, probs, _, _, _ = random_case(rng, np.float64)
    H, W, L = probs.shape
    for h in range(H):
        for w in range(W):
            one = np.zeros((H, W, 1))
            one[h, w] = 1.0
            total = splat(table, probs, one).sum()
            inb = table.cell_index[h, w] >= 0
            expected = probs[h, w][inb].sum()
            assert total == pytest.approx(expected, abs=1e-12)
            assert total <= 1 + 1e-12


def test_splat_backward_is_the_adjoint(rng):
    for _ in range(10):
        table, probs, feats, _, _ = random_case(rng, np.float64)
        g = rng.normal(size=(table.grid.n_cells, feats.shape[-1]))
        gp, gf = splat_backward(table, probs, feats, g)
        dp, df = rng.normal(size=probs.shape), rng.normal(size=feats.shape)
        # <g, d out> for a bilinear map: out(p + e dp, f + e df) first-order term
        lin = (g * (splat(table, dp, feats) + splat(table, probs, df))).sum()
        assert (gp * dp).sum() + (gf * df).sum() == pytest.approx(lin, rel=1e-10, abs=1e-12)


def test_merge_camera_bevs():
    g = BevGridSpec(0, 2, 0, 1, 1.0)
    a = BevMap(g, np.array([[[1.0]], [[0.0]]]), np.array([[True], [False]]))
    b = BevMap(g, np.array([[[2.0]], [[5.0]]]), np.array([[True], [True]]))
    assert merge_camera_bevs([a]).features.tolist() == a.features.tolist()
    m = merge_camera_bevs([a, b])
    assert m.features[:, 0, 0].tolist() == [3.0, 5.0]
    assert m.valid_mask.all()
    with pytest.raises(ValidationError):
        merge_camera_bevs([])


def test_ground_pixel_lands_where_hand_projection_says():
    # camera 2 m up looking along +z, tilted down 45 degrees; centre pixel hits the ground 2 m ahead
    K = CameraIntrinsics(10.0, 10.0, 0.5, 0.5, 1, 1)
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    R = np.array([[-1.0, 0, 0], [0, -c, -s], [0, -s, c]])
    T = Se3Pose(R, [0.0, 2.0, 0.0])
    d = 2.0 * math.sqrt(2.0)
    p_cam = unproject(K, 0.5, 0.5, d)
    p = R @ p_cam + T.translation
    assert p == pytest.approx([0.0, 0.0, 2.0], abs=1e-12)
    assert project(K, p_cam)[:2] == pytest.approx((0.5, 0.5))
