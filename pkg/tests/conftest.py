import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from thermogrid.camera import CameraIntrinsics, CameraPose
from thermogrid.voxel_field import GridBounds, VoxelGrid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_grid(rng, dims=(4, 4, 4), bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                density_scale=3.0, temp_range=(20.0, 40.0)) -> VoxelGrid:
    grid = VoxelGrid.full(dims, GridBounds(*bounds), temp_range=temp_range)
    grid.density[:] = rng.uniform(0.0, density_scale, grid.density.shape)
    grid.sh[:] = rng.normal(0.0, 0.5, grid.sh.shape)
    grid.sh[:, 0::9] += 1.5
    grid.temperature[:] = rng.uniform(0.0, 1.0, grid.temperature.shape)
    return grid


def random_pose(rng, radius=3.5) -> CameraPose:
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    if abs(v[2]) > 0.95:
        v[2] = 0.5
        v /= np.linalg.norm(v)
    return CameraPose.look_at(radius * v, rng.uniform(-0.2, 0.2, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics.from_fov(8, 8, 50.0)
