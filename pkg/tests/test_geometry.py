import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevalign.errors import BehindCameraError, ValidationError
from bevalign.geometry import (
    BevGridSpec, BevMap, CameraIntrinsics, DepthBins, Se3Pose, compose, flat_cell_index, invert, planar_distance,
    project, rot_x, rot_y, rot_z, transform_point, transform_points, unproject, unproject_grid, world_to_cell,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)
coords = st.floats(-50, 50, allow_nan=False)


def random_pose(rng):
    R = rot_z(rng.uniform(-3, 3)) @ rot_x(rng.uniform(-3, 3)) @ rot_y(rng.uniform(-3, 3))
    return Se3Pose(R, rng.normal(size=3) * 5)


def test_yaw_zero_faces_plus_z_and_positive_yaw_turns_toward_plus_x():
    assert np.allclose(rot_y(0.0) @ [0, 0, 1], [0, 0, 1])
    assert np.allclose(rot_y(math.pi / 2) @ [0, 0, 1], [1, 0, 0], atol=1e-15)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValidationError):
        Se3Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValidationError):
        Se3Pose(np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(ValidationError):
        Se3Pose(np.eye(3), [0.0, np.nan, 0.0])


def test_pose_arrays_are_read_only():
    p = Se3Pose.planar(1, 2, 0.3)
    with pytest.raises(ValueError):
        p.translation[0] = 5.0


def test_compose_with_inverse_is_identity(rng):
    for _ in range(20):
        p = random_pose(rng)
        e = compose(p, invert(p))
        assert np.abs(e.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(e.translation).max() < 1e-12


@given(angles, angles, coords, coords, coords, coords, coords, coords)
def test_compose_matches_homogeneous_product(a, b, x1, z1, x2, z2, px, pz):
    A = Se3Pose.planar(x1, z1, a)
    B = Se3Pose.planar(x2, z2, b)
    p = np.array([px, 0.3, pz])
    via_pose = transform_point(compose(A, B), p)
    via_matrix = (A.matrix() @ B.matrix() @ np.append(p, 1.0))[:3]
    assert np.allclose(via_pose, via_matrix, atol=1e-9)


@given(coords, coords, st.floats(-3.1, 3.1))
def test_planar_params_round_trip(x, z, yaw):
    got = Se3Pose.planar(x, z, yaw).planar_params()
    assert got[0] == pytest.approx(x) and got[1] == pytest.approx(z)
    assert got[2] == pytest.approx(yaw, abs=1e-12)


def test_compose_keeps_rotation_orthonormal_over_long_chains(rng):
    p = Se3Pose.identity()
    step = random_pose(rng)
    for _ in range(2000):
        p = compose(p, step)
    assert np.abs(p.rotation @ p.rotation.T - np.eye(3)).max() < 1e-9


def test_transform_points_matches_single_point(rng):
    T = random_pose(rng)
    pts = rng.normal(size=(5, 4, 3))
    many = transform_points(T, pts)
    for idx in np.ndindex(5, 4):
        assert np.allclose(many[idx], transform_point(T, pts[idx]))


def test_planar_distance_wraps_yaw():
    a = Se3Pose.planar(0, 0, math.pi - 0.1)
    b = Se3Pose.planar(3, 4, -math.pi + 0.1)
    assert planar_distance(a, b) == pytest.approx(5.0 + 0.2)


K = CameraIntrinsics(100.0, 120.0, 32.0, 24.0, 64, 48)


def test_project_known_point():
    # hand computation: u = 100 * 1 / 4 + 32, v = 120 * -2 / 4 + 24
    u, v, d = project(K, [1.0, -2.0, 4.0])
    assert (u, v, d) == (57.0, -36.0, 4.0)


def test_project_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project(K, [0.0, 0.0, -1.0])
    with pytest.raises(BehindCameraError):
        project(K, [1.0, 0.0, 0.0])


def test_unproject_rejects_non_positive_depth():
    with pytest.raises(ValidationError):
        unproject(K, 1.0, 1.0, 0.0)


@given(st.floats(-100, 200), st.floats(-100, 200), st.floats(0.01, 500))
def test_unproject_then_project_round_trip(u, v, d):
    pu, pv, pd = project(K, unproject(K, u, v, d))
    assert pu == pytest.approx(u, abs=1e-9) and pv == pytest.approx(v, abs=1e-9)
    assert pd == pytest.approx(d)


def test_unproject_grid_broadcasts_like_scalar_version():
    u = np.array([0.5, 10.5])[None, :, None]
    v = np.array([3.5])[:, None, None]
    d = np.array([1.0, 7.0])[None, None, :]
    g = unproject_grid(K, u, v, d)
    assert g.shape == (1, 2, 2, 3)
    assert np.allclose(g[0, 1, 1], unproject(K, 10.5, 3.5, 7.0))


def test_from_fov_centre_and_focal():
    k = CameraIntrinsics.from_fov(24, 16, 90.0)
    assert (k.cx, k.cy) == (12.0, 8.0)
    assert k.fx == pytest.approx(12.0)


def test_grid_rejects_extent_not_multiple_of_cell():
    with pytest.raises(ValidationError):
        BevGridSpec(0, 10, 0, 10, 3.0)
    with pytest.raises(ValidationError):
        BevGridSpec(0, 10, 0, 10, 0.0)


def test_world_to_cell_examples():
    g = BevGridSpec(-4, 4, 0, 8, 0.5)
    assert g.shape == (16, 16)
    assert world_to_cell(g, [0.0, 9.0, 0.0]) == (8.0, 0.0)
    assert world_to_cell(g, [4.0, 0.0, 1.0]) is None  # upper edge is exclusive
    assert world_to_cell(g, [-4.0, 0.0, 7.99]) == pytest.approx((0.0, 15.98))
    assert flat_cell_index(g, np.array([[0.1, 0, 0.6], [9, 0, 0]])).tolist() == [8 * 16 + 1, -1]


def test_cell_centers():
    g = BevGridSpec(-1, 1, 0, 3, 1.0)
    c = g.cell_centers()
    assert c.shape == (2, 3, 2)
    assert c[0, 0].tolist() == [-0.5, 0.5] and c[1, 2].tolist() == [0.5, 2.5]


def test_default_depth_bins_count():
    # 1 m to 80 m in 0.5 m steps gives 158 bins
    b = DepthBins()
    assert b.L == 158
    assert b.centers()[0] == 1.25 and b.centers()[-1] == 79.75


def test_depth_bins_validation():
    with pytest.raises(ValidationError):
        DepthBins(0.0, 10.0, 1.0)
    with pytest.raises(ValidationError):
        DepthBins(1.0, 10.0, 0.7)


def test_bev_map_validation():
    g = BevGridSpec(0, 2, 0, 2, 1.0)
    with pytest.raises(ValidationError):
        BevMap(g, np.zeros((3, 2, 1)), np.zeros((3, 2), bool))
    with pytest.raises(ValidationError):
        BevMap(g, np.full((2, 2, 1), np.inf), np.ones((2, 2), bool))
    e = BevMap.empty(g, 4)
    assert e.dim == 4 and not e.valid_mask.any()


def test_compose_hand_multiplied_example():
    a = Se3Pose(rot_z(math.pi / 2), [1.0, 0.0, 0.0])
    b = Se3Pose(rot_z(math.pi / 2), np.zeros(3))
    c = compose(a, b)
    assert np.allclose(c.rotation, [[-1, 0, 0], [0, -1, 0], [0, 0, 1]], atol=1e-15)
    assert np.allclose(c.translation, [1, 0, 0])
    assert np.allclose(transform_point(Se3Pose(rot_z(math.pi / 2)), [1, 0, 0]), [0, 1, 0], atol=1e-15)


def test_invert_pure_translation():
    p = invert(Se3Pose(np.eye(3), [1.0, 2.0, 3.0]))
    assert p.translation.tolist() == [-1.0, -2.0, -3.0]
    assert np.array_equal(invert(Se3Pose.identity()).rotation, np.eye(3))


def test_pinhole_examples():
    k = CameraIntrinsics(100, 100, 50, 50, 100, 100)
    assert project(k, [0, 0, 2]) == (50, 50, 2)
    assert project(k, [1, 0, 2]) == (100, 50, 2)
    assert unproject(k, 150, 50, 2).tolist() == [2, 0, 2]


def test_hundred_metre_grid_origin_cell():
    g = BevGridSpec(-50, 50, -50, 50, 0.5)
    assert world_to_cell(g, [0.0, 0.0, 0.0]) == (100.0, 100.0)
    assert world_to_cell(g, [-50.0, 0.0, -50.0]) == (0.0, 0.0)


@given(st.floats(-7.99, 7.99), st.floats(-7.99, 7.99), st.floats(0.01, 3))
def test_world_to_cell_monotone_and_in_range(x, z, dx):
    g = BevGridSpec(-8, 8, -8, 8, 0.5)
    a = world_to_cell(g, [x, 0, z])
    b = world_to_cell(g, [min(x + dx, 7.999), 0, z])
    assert 0 <= math.floor(a[0]) <= g.cells_x - 1 and 0 <= math.floor(a[1]) <= g.cells_z - 1
    if x + dx < 7.999:
        assert b[0] > a[0]
