import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lib.state import Pose


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, n: int = 6, min_eig: float = 0.1, max_eig: float = 100.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    values = np.exp(rng.uniform(np.log(min_eig), np.log(max_eig), n))
    m = q @ np.diag(values) @ q.T
    return 0.5 * (m + m.T)


def random_rotation(rng) -> np.ndarray:
    return Rotation.from_rotvec(rng.normal(size=3) * 0.8).as_matrix()


def random_pose(rng, spread: float = 2.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(size=3) * spread)


def block_diag_spd(rng) -> np.ndarray:
    m = np.zeros((6, 6))
    m[:3, :3] = random_spd(rng, 3)
    m[3:, 3:] = random_spd(rng, 3)
    return m
