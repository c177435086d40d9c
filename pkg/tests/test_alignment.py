import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevalign import alignment as al
from bevalign import gradcheck as gc
from bevalign import train as T
from bevalign.errors import NumericalError, ValidationError
from bevalign.geometry import BevGridSpec, BevMap, Se3Pose

GRID8 = BevGridSpec(-4, 4, -4, 4, 1.0)


def random_map(rng, grid, D=3, p_valid=0.8):
    return BevMap(grid.with_dim(D), rng.normal(size=grid.shape + (D,)), rng.uniform(size=grid.shape) < p_valid)


def brute_force_similarity(query: BevMap, ref: BevMap, pose: Se3Pose, normalization: str):
    """Double loop over query cells with a hand-written bilinear lookup."""
    rg, qg = ref.grid, query.grid
    R, t = pose.rotation, pose.translation
    total, count = 0.0, 0
    for i in range(qg.cells_x):
        for j in range(qg.cells_z):
            if not query.valid_mask[i, j]:
                continue
            px = qg.x_min + (i + 0.5) * qg.cell_size
            pz = qg.z_min + (j + 0.5) * qg.cell_size
            lx = R[0, 0] * px + R[0, 2] * pz + t[0]
            lz = R[2, 0] * px + R[2, 2] * pz + t[2]
            cx = (lx - rg.x_min) / rg.cell_size - 0.5
            cz = (lz - rg.z_min) / rg.cell_size - 0.5
            if not (0 <= cx <= rg.cells_x - 1 and 0 <= cz <= rg.cells_z - 1):
                continue
            x0 = min(int(math.floor(cx)), rg.cells_x - 2)
            z0 = min(int(math.floor(cz)), rg.cells_z - 2)
            fx, fz = cx - x0, cz - z0
            val = np.zeros(ref.dim)
            ok = True
            for dx, wx in ((0, 1 - fx), (1, fx)):
                for dz, wz in ((0, 1 - fz), (1, fz)):
                    w = wx * wz
                    if w == 0:
                        continue
                    if not ref.valid_mask[x0 + dx, z0 + dz]:
                        ok = False
                    val += w * ref.features[x0 + dx, z0 + dz]
            if not ok:
                continue
            total += float(np.dot(query.features[i, j], val))
            count += 1
    if count == 0:
        return 0.0, 0
    return (total / count if normalization == "mean" else total), count


# ---------------------------------------------------------------- warp


def test_identity_warp_is_exact(rng):
    ref = random_map(rng, GRID8)
    out = al.warp_sample(ref, Se3Pose.identity(), GRID8)
    assert np.array_equal(out.features[ref.valid_mask], ref.features[ref.valid_mask])
    assert np.array_equal(out.valid_mask, ref.valid_mask)


def test_half_cell_translation_on_ramp():
    g = BevGridSpec(0, 2, 0, 1, 1.0)
    ref = BevMap(g, np.array([[[0.0]], [[1.0]]]), np.ones((2, 1), bool))
    q = BevGridSpec(0, 1, 0, 1, 1.0)
    out = al.warp_sample(ref, Se3Pose.planar(0.5, 0.0, 0.0), q)
    assert out.valid_mask[0, 0]
    assert out.features[0, 0, 0] == 0.5


def test_warp_out_of_bounds_is_invalid(rng):
    out = al.warp_sample(random_map(rng, GRID8, p_valid=1.0), Se3Pose.planar(100, 0, 0), GRID8)
    assert not out.valid_mask.any()


@given(st.integers(-3, 3), st.integers(-3, 3))
def test_integer_cell_shift_is_exact(kx, kz):
    rng = np.random.default_rng((kx + 3) * 7 + kz + 3)
    ref = random_map(rng, GRID8, p_valid=1.0)
    out = al.warp_sample(ref, Se3Pose.planar(float(kx), float(kz), 0.0), GRID8)
    for i in range(8):
        for j in range(8):
            si, sj = i + kx, j + kz
            inside = 0 <= si < 8 and 0 <= sj < 8
            assert out.valid_mask[i, j] == inside
            if inside:
                assert np.array_equal(out.features[i, j], ref.features[si, sj])


# ---------------------------------------------------------------- similarity


@pytest.mark.parametrize("normalization", ["mean", "sum"])
def test_similarity_matches_brute_force_on_8x8(normalization):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        q, r = random_map(rng, GRID8, 4), random_map(rng, GRID8, 4)
        pose = Se3Pose.planar(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-math.pi, math.pi))
        got = al.similarity(q, r, pose, al.AlignmentConfig(normalization=normalization))
        want, n = brute_force_similarity(q, r, pose, normalization)
        assert got.valid_cell_count == n
        worst = max(worst, abs(got.score - want))
    assert worst < 1e-9


def test_self_similarity_raw_sum_is_squared_norm(rng):
    m = random_map(rng, GRID8)
    rep = al.similarity(m, m, Se3Pose.identity(), al.AlignmentConfig(normalization="sum"))
    assert rep.score == pytest.approx(float((m.features[m.valid_mask] ** 2).sum()), rel=1e-12)
    assert rep.valid_cell_count == int(m.valid_mask.sum())


def test_orthogonal_fields_score_zero():
    f0 = np.zeros(GRID8.shape + (2,))
    f1 = np.zeros(GRID8.shape + (2,))
    f0[..., 0] = 1.0
    f1[..., 1] = 1.0
    ok = np.ones(GRID8.shape, bool)
    rep = al.similarity(BevMap(GRID8.with_dim(2), f0, ok), BevMap(GRID8.with_dim(2), f1, ok), Se3Pose.identity())
    assert rep.score == 0.0 and rep.valid_cell_count == 64


def test_no_overlap_scores_zero(rng):
    rep = al.similarity(random_map(rng, GRID8), random_map(rng, GRID8), Se3Pose.planar(50, 50, 0))
    assert rep == al.SimilarityReport(0.0, 0)


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3))
def test_mean_similarity_invariant_to_invalid_padding(seed, pad):
    rng = np.random.default_rng(seed)
    q, r = random_map(rng, GRID8), random_map(rng, GRID8)
    pose = Se3Pose.planar(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1))
    big = BevGridSpec(-4 - pad, 4 + pad, -4 - pad, 4 + pad, 1.0)

    def padded(m):
        f = np.pad(m.features, [(pad, pad), (pad, pad), (0, 0)])
        f[:pad] = f[-pad:] = f[:, :pad] = f[:, -pad:] = 9.0  # junk under invalid cells
        return BevMap(big.with_dim(m.dim), f, np.pad(m.valid_mask, pad))

    a = al.similarity(q, r, pose)
    b = al.similarity(padded(q), padded(r), pose)
    assert b.valid_cell_count == a.valid_cell_count
    assert b.score == pytest.approx(a.score, abs=1e-9)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 10.0))
def test_feature_rescale_scales_raw_scores_by_lambda_squared(seed, lam):
    rng = np.random.default_rng(seed)
    q, r = random_map(rng, GRID8), random_map(rng, GRID8)
    poses = [Se3Pose.planar(*rng.uniform(-2, 2, 2), rng.uniform(-1, 1)) for _ in range(6)]
    cfg = al.AlignmentConfig(normalization="sum")
    s = np.array([al.similarity(q, r, p, cfg).score for p in poses])
    qs = BevMap(q.grid, q.features * lam, q.valid_mask)
    rs = BevMap(r.grid, r.features * lam, r.valid_mask)
    s2 = np.array([al.similarity(qs, rs, p, cfg).score for p in poses])
    assert np.allclose(s2, lam ** 2 * s, rtol=1e-9, atol=1e-9)
    assert np.argmax(s2) == np.argmax(s)
    assert al.info_nce_loss(s2, 0.7 * lam ** 2) == pytest.approx(al.info_nce_loss(s, 0.7), abs=1e-9)


# ---------------------------------------------------------------- InfoNCE


@given(st.integers(2, 64), st.floats(-50, 50), st.floats(0.01, 100))
def test_uniform_scores_give_log_ns(n, value, tau):
    assert abs(al.info_nce_loss([value] * n, tau) - math.log(n)) < 1e-12


def test_dominant_positive_loss_vanishes():
    assert al.info_nce_loss([100.0, 0.0, -1.0, 0.5], 1.0) < 1e-3
    assert al.info_nce_loss([1e6, 0.0], 0.1) == 0.0


def test_worked_example():
    want = math.log(1 + math.exp(-1) + math.exp(-2))
    assert al.info_nce_loss([2.0, 1.0, 0.0], 1.0) == pytest.approx(want, abs=1e-15)
    assert round(want, 5) == 0.40761


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=10), st.floats(-1e3, 1e3), st.floats(0.05, 5))
def test_shift_invariance(scores, c, tau):
    a = al.info_nce_loss(scores, tau)
    b = al.info_nce_loss([s + c for s in scores], tau)
    assert abs(a - b) < 1e-9


def test_info_nce_rejects_bad_input():
    with pytest.raises(ValidationError):
        al.info_nce_loss([1.0], 1.0)
    with pytest.raises(NumericalError):
        al.info_nce_loss([1.0, float("nan")], 1.0)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.floats(-2, 1))
def test_info_nce_grads_match_finite_differences(scores, log_tau):
    loss, g_s, g_lt = al.info_nce_grads(scores, log_tau)
    h = 1e-6
    f = lambda s, lt: al.info_nce_grads(s, lt)[0]
    num_lt = (f(scores, log_tau + h) - f(scores, log_tau - h)) / (2 * h)
    assert g_lt == pytest.approx(num_lt, abs=1e-6)
    for k in range(len(scores)):
        up = list(scores)
        dn = list(scores)
        up[k] += h
        dn[k] -= h
        assert g_s[k] == pytest.approx((f(up, log_tau) - f(dn, log_tau)) / (2 * h), abs=1e-6)


def test_log_tau_gradient_sign_agrees_with_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(200):
        s = rng.normal(size=6)
        s[0] = s.max() + rng.uniform(0.01, 2)  # positive strictly largest
        lt = rng.uniform(-2, 1)
        _, _, g = al.info_nce_grads(s, lt)
        num = (al.info_nce_grads(s, lt + 1e-5)[0] - al.info_nce_grads(s, lt - 1e-5)[0]) / 2e-5
        if abs(num) > 1e-8:
            assert np.sign(g) == np.sign(num)
        # with the positive on top, a larger temperature flattens the softmax and raises the loss
        assert g > 0


# ---------------------------------------------------------------- negatives

RIG = [Se3Pose.planar(0, 0, 0), Se3Pose.planar(1, 0, 1.0), Se3Pose.planar(0, -1, 3.0), Se3Pose.planar(-1, 0, -1.5)]


def test_negative_sampling_edge_cases():
    assert al.sample_negative_poses(RIG, 0, 0, 1.0, 0.1, seed=1) == []
    with pytest.raises(ValidationError):
        al.sample_negative_poses(RIG[:1], 0, 3, 1.0, 0.1, seed=1)
    with pytest.raises(ValidationError):
        al.sample_negative_poses(RIG, 0, -1, 1.0, 0.1, seed=1)


def test_zero_sigma_gives_exact_copies_of_other_cameras():
    out = al.sample_negative_poses(RIG, 1, 50, 0.0, 0.0, seed=5)
    others = [RIG[j] for j in (0, 2, 3)]
    seen = set()
    for p in out:
        match = [k for k, o in enumerate(others)
                 if np.array_equal(o.rotation, p.rotation) and np.array_equal(o.translation, p.translation)]
        assert len(match) == 1
        seen.add(match[0])
    assert seen == {0, 1, 2}


def test_negative_sampling_is_seeded_and_gaussian():
    a = al.sample_negative_poses(RIG, 0, 10_000, 0.5, 0.1, seed=11)
    b = al.sample_negative_poses(RIG, 0, 10_000, 0.5, 0.1, seed=11)
    assert all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(a, b))
    # translation offset relative to the nearest base camera position
    bases = np.array([p.translation for p in RIG[1:]])
    d = np.array([p.translation for p in a])
    off = d[:, None, :] - bases[None]
    # identify the base camera through the yaw, which the jitter moves only slightly
    yaw = np.array([p.planar_params()[2] for p in a])
    base_yaw = np.array([p.planar_params()[2] for p in RIG[1:]])
    gap = np.abs((yaw[:, None] - base_yaw[None] + np.pi) % (2 * np.pi) - np.pi)
    k = gap.argmin(1)
    o = off[np.arange(len(a)), k][:, [0, 2]]
    assert np.all(off[np.arange(len(a)), k][:, 1] == 0)
    assert np.mean(np.abs(o) <= 3 * 0.5) >= 0.99
    assert abs(o.mean()) < 0.02 and abs(o.std() - 0.5) < 0.02


def test_pose_sample_set_checks():
    with pytest.raises(ValidationError):
        al.PoseSampleSet(RIG[0], [])
    with pytest.raises(ValidationError):
        al.PoseSampleSet(RIG[0], [RIG[1], Se3Pose.planar(0, 0, 0)])
    assert al.PoseSampleSet(RIG[0], RIG[1:]).n_samples == 4


def test_alignment_config_validation():
    with pytest.raises(ValidationError):
        al.AlignmentConfig(normalization="max")
    with pytest.raises(ValidationError):
        al.AlignmentConfig(num_samples=1)
    with pytest.raises(ValidationError):
        al.AlignmentConfig(tau0=0)


# ---------------------------------------------------------------- full loss


def test_zero_features_are_a_stationary_point():
    inst = gc.random_instance(0)
    for k in ("camera.b", "lidar.b"):
        inst.params[k][:] = 0
    sc = inst.scene.tensors
    zero = al.SceneTensors([np.zeros_like(c) for c in sc.camera_features], np.zeros_like(sc.lidar_inputs),
                           sc.lidar_valid)
    loss, grads = al.loss_and_gradients(zero, inst.params, inst.geom, inst.negatives,
                                        T.alignment_config(inst.cfg))
    assert loss == pytest.approx(math.log(inst.cfg.alignment.num_samples), abs=1e-12)
    for k in ("camera.W", "camera.b", "depth.W", "depth.b", "lidar.W", "lidar.b", "log_tau"):
        assert not np.any(grads[k]), k


def test_alignment_gradients_match_finite_differences():
    rows = gc.check_alignment(5)
    assert {r.param for r in rows} == {"camera.W", "camera.b", "depth.W", "depth.b", "lidar.W", "lidar.b", "log_tau"}
    assert max(r.max_rel_error for r in rows) < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_input_names_the_stage():
    inst = gc.random_instance(1)
    bad = inst.scene.tensors.lidar_inputs.copy()
    bad[0, 0, 0] = np.inf
    sc = al.SceneTensors(inst.scene.tensors.camera_features, bad, inst.scene.tensors.lidar_valid)
    with pytest.raises(NumericalError, match="lidar_head"):
        al.loss_and_gradients(sc, inst.params, inst.geom, inst.negatives, T.alignment_config(inst.cfg))
