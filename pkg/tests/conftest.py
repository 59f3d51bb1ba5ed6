import numpy as np
import pytest

from lgkd.bev import GridSpec
from lgkd.geometry import CameraRig, surround_rig


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (via quaternion)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rig(rng: np.random.Generator, n_cameras: int = 1) -> CameraRig:
    """Rig with random orthonormal extrinsics and generic intrinsics."""
    ks, rs, ts = [], [], []
    for _ in range(n_cameras):
        fx, fy = rng.uniform(50, 400, size=2)
        cx, cy = rng.uniform(20, 100, size=2)
        skew = rng.uniform(-2, 2)
        ks.append(np.array([[fx, skew, cx], [0, fy, cy], [0, 0, 1.0]]))
        rs.append(random_rotation(rng))
        ts.append(rng.uniform(-3, 3, size=3))
    return CameraRig(
        intrinsics=np.stack(ks), rotations=np.stack(rs), translations=np.stack(ts),
        lidar_rotation=random_rotation(rng), lidar_translation=rng.uniform(-2, 2, size=3),
        image_height=64, image_width=128)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def default_rig():
    return surround_rig()


@pytest.fixture
def small_grid():
    return GridSpec(-4.0, 4.0, -4.0, 4.0, 8, 8)
