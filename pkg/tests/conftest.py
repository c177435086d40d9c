import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def planar_pose_strategy(max_trans=5.0):
    from hypothesis import strategies as st

    from bevalign.geometry import Se3Pose

    f = st.floats(-max_trans, max_trans, allow_nan=False)
    yaw = st.floats(-np.pi, np.pi, allow_nan=False)
    return st.builds(lambda x, z, a: Se3Pose.planar(x, z, a), f, f, yaw)


# A desk-sized configuration: 3 cameras, 12 m x 12 m ego grid, 8 depth bins.
TINY = [
    "world.extent=32", "world.feature_dim=6", "world.nuisance_channels=1", "world.num_classes=3",
    "model.camera_channels=6", "model.feature_dim=4",
    "rig.num_cameras=3", "rig.feat_h=4", "rig.feat_w=6", "rig.azimuth_steps=90", "rig.ground_beams=12",
    "grid.x_min=-6", "grid.x_max=6", "grid.z_min=-6", "grid.z_max=6",
    "grid.query_x_min=-4", "grid.query_x_max=4", "grid.query_z_min=0", "grid.query_z_max=6",
    "bins.d_min=1", "bins.d_max=9", "bins.step=1",
    "alignment.num_samples=4", "train.pretrain_epochs=2", "train.finetune_epochs=2", "train.batch_size=2",
]


def tiny_config(*extra):
    from bevalign.config import RunConfig

    return RunConfig().override(TINY + list(extra)).validate()


@pytest.fixture(scope="session")
def tiny_scenes():
    """(cfg, samples, scenes) for six tiny scenes."""
    from bevalign.datasets import generate_samples, prepare_all, split_seeds

    cfg = tiny_config()
    samples = generate_samples(cfg, split_seeds(0, "train", 6))
    return cfg, samples, prepare_all(samples, cfg)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
