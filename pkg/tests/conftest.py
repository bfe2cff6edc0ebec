import numpy as np
import pytest

from rsba.geometry import RsCamera, so3_exp
from rsba.problem import NoisePrior, Observation


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_camera(rng, speed_ang=0.15, speed_lin=0.9, focal=1000.0):
    """A camera with a random pose and intra-frame motion, looking roughly at
    the origin from a distance of ~20 units."""
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    center = 20.0 * direction
    # look-at rotation: z axis toward the origin
    z = -direction
    up = np.array([0.0, 1.0, 0.0])
    if abs(z @ up) > 0.95:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R0 = np.stack([x, y, z])
    R0 = so3_exp(0.05 * rng.standard_normal(3)) @ R0
    omega = speed_ang * _unit(rng)
    d = speed_lin * _unit(rng)
    return RsCamera(
        R0=R0,
        t0=-R0 @ center,
        omega=omega,
        d=d,
        fx=focal,
        fy=focal,
        cx=640.0,
        cy=540.0,
    )


def _unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def random_scene_point(rng):
    return rng.uniform(-5.0, 5.0, size=3)


def synthetic_observation(cam, p, rng=None, sigma_px=0.0):
    """Physically consistent observation of p, optional pixel noise."""
    from rsba.geometry import denormalize_measurement, normalize_measurement, project_dc

    q = project_dc(cam, p)
    m = denormalize_measurement(q, cam)
    if rng is not None and sigma_px > 0.0:
        m = m + sigma_px * rng.standard_normal(2)
    q = normalize_measurement(m, cam)
    return Observation(cam_id=0, point_id=0, q=q, m=m)


@pytest.fixture
def default_prior():
    return NoisePrior.isotropic(1.0)
