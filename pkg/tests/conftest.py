import numpy as np
import pytest

from tracksfm.pipeline import PipelineConfig, reconstruct
from tracksfm.scene import Camera
from tracksfm.tracks import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def clean_scene():
    return generate_synthetic(SyntheticConfig(seed=0))


@pytest.fixture(scope="session")
def noisy_outlier_scene():
    return generate_synthetic(SyntheticConfig(noise_px=1.0, outlier_frac=0.2, seed=3))


@pytest.fixture(scope="session")
def clean_reconstruction(clean_scene):
    return reconstruct(clean_scene, PipelineConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def look_camera(center, target=(0.0, 0.0, 0.0), focal=1000.0, pp=(512.0, 384.0)):
    """Camera at ``center`` with its optical axis through ``target``."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    R = np.stack([x, np.cross(z, x), z])
    return Camera.from_rt(R, -R @ center, focal, pp)
