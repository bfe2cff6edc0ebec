import numpy as np
import pytest

from rsba.errors import (
    CheiralityViolation,
    DegenerateCovariance,
    MissingPixelMeasurement,
)
from rsba.geometry import (
    RsCamera,
    camera_to_direct,
    denormalize_measurement,
    normalize_measurement,
    project_dc,
    project_dc_direct,
    project_rs_normalized,
    transform_to_camera,
)
from rsba.problem import NoisePrior, Observation
from rsba.residuals import (
    error_dm,
    error_gs,
    error_nm,
    error_nw,
    rectified_point,
    residual_covariance,
    weight_C,
    weight_W,
    whiten,
)

from conftest import random_camera, random_scene_point, synthetic_observation


def degenerate_config():
    """Observation satisfying the planar-degeneracy conditions exactly.

    World point on the camera's y = 0 plane, depth fed into the vertical
    velocity so that every image row sees the point at its own row
    coordinate: the y-residual is then insensitive to the measured row.
    """
    p = np.array([1.2, 0.7, 3.0])
    t0 = np.array([0.2, -p[1], 5.0])
    zg = p[2] + t0[2]
    cam = RsCamera(
        R0=np.eye(3), t0=t0, omega=np.zeros(3), d=np.array([0.4, zg, 0.0]),
        fx=1000.0, fy=1000.0, cx=640.0, cy=540.0,
    )
    r = 0.2
    pc = transform_to_camera(cam, p, r)
    q = np.array([pc[0] / pc[2], r])
    obs = Observation(cam_id=0, point_id=0, q=q, m=denormalize_measurement(q, cam))
    return cam, p, obs


class TestErrorNm:
    def test_zero_at_ground_truth(self, rng):
        for _ in range(10):
            cam = random_camera(rng)
            p = random_scene_point(rng)
            obs = synthetic_observation(cam, p)
            assert np.abs(error_nm(cam, p, obs)).max() < 1e-10

    def test_static_equals_gs(self, rng):
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p, rng, sigma_px=2.0)
        assert np.allclose(error_nm(cam, p, obs), error_gs(cam, p, obs))

    def test_cheirality_propagates(self, rng):
        cam = random_camera(rng)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p)
        behind = cam.center + (cam.center - p)  # reflect through the camera
        with pytest.raises(CheiralityViolation):
            error_nm(cam, behind, obs)


class TestErrorDm:
    def test_zero_at_direct_ground_truth(self, rng):
        for _ in range(10):
            cam = camera_to_direct(random_camera(rng))
            p = random_scene_point(rng)
            m = project_dc_direct(cam, p)
            obs = Observation(0, 0, q=normalize_measurement(m, cam), m=m)
            assert np.abs(error_dm(cam, p, obs)).max() < 1e-8

    def test_static_is_pixel_gs(self, rng):
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p, rng, sigma_px=1.0)
        e_px = error_dm(cam, p, obs)
        e_gs = error_gs(cam, p, obs)
        assert np.abs(e_px - np.array([cam.fx, cam.fy]) * e_gs).max() < 1e-9

    def test_requires_pixel_measurement(self, rng):
        cam = random_camera(rng)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p)
        obs.m = None
        with pytest.raises(MissingPixelMeasurement):
            error_dm(cam, p, obs)

    def test_nm_cost_not_above_dm_cost_at_truth(self, rng):
        # both evaluated at the true parameters on physically consistent
        # noisy scenes; the pixel-domain model carries an extra modeling
        # error, so its focal-normalized cost comes out larger
        nm_tot, dm_tot = 0.0, 0.0
        for _ in range(40):
            cam = random_camera(rng, speed_ang=0.3, speed_lin=1.8)
            cam_dm = camera_to_direct(cam)
            p = random_scene_point(rng)
            obs = synthetic_observation(cam, p, rng, sigma_px=1.0)
            W = weight_W(cam)
            nm_tot += float(error_nm(cam, p, obs) @ error_nm(cam, p, obs))
            e_dm = W @ error_dm(cam_dm, p, obs)
            dm_tot += float(e_dm @ e_dm)
        assert nm_tot <= dm_tot


class TestWeightC:
    def test_identity_when_static(self, rng):
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        p = random_scene_point(rng)
        assert np.allclose(weight_C(cam, p, 0.3), np.eye(2))

    def test_structure(self, rng):
        for _ in range(10):
            cam = random_camera(rng)
            p = random_scene_point(rng)
            C = weight_C(cam, p, 0.1)
            assert C[0, 0] == 1.0 and C[1, 0] == 0.0

    def test_degeneracy_marker(self):
        cam, p, obs = degenerate_config()
        C = weight_C(cam, p, obs.q[1])
        assert abs(C[1, 1]) < 1e-10

    def test_finite_difference_oracle(self, rng):
        # column of C beyond the identity equals -d proj / d row
        h = 1e-6
        for _ in range(20):
            cam = random_camera(rng)
            p = random_scene_point(rng)
            r = rng.uniform(-0.5, 0.5)
            C = weight_C(cam, p, r)
            chi = -C @ np.array([0.0, 1.0]) + np.array([0.0, 1.0])
            fd = (
                project_rs_normalized(cam, p, r + h)
                - project_rs_normalized(cam, p, r - h)
            ) / (2.0 * h)
            assert np.abs(chi - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())


class TestWeightW:
    def test_values(self):
        cam = RsCamera(R0=np.eye(3), t0=np.zeros(3), fx=1000.0, fy=1000.0)
        assert np.allclose(weight_W(cam), np.diag([1e-3, 1e-3]))

    def test_unit_focal(self):
        cam = RsCamera(R0=np.eye(3), t0=np.zeros(3), fx=1.0, fy=1.0)
        assert np.allclose(weight_W(cam), np.eye(2))

    def test_inverse_relation(self, rng):
        cam = random_camera(rng)
        assert np.allclose(weight_W(cam) @ np.diag([cam.fx, cam.fy]), np.eye(2))


class TestResidualCovariance:
    def test_identity_case(self):
        S = residual_covariance(np.eye(2), np.eye(2), np.eye(2))
        assert np.allclose(S, np.eye(2))

    def test_monte_carlo(self, rng):
        # sampling oracle: push pixel noise through the projection at fixed
        # parameters and compare the empirical residual covariance
        cam = random_camera(rng, speed_ang=0.35, speed_lin=2.0)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p)
        sigma = np.array([[1.5, 0.4], [0.4, 0.8]])
        C = weight_C(cam, p, obs.q[1])
        predicted = residual_covariance(C, weight_W(cam), sigma)

        n_draws = 200_000
        L = np.linalg.cholesky(sigma)
        noise_px = rng.standard_normal((n_draws, 2)) @ L.T
        q_noisy = obs.q[None, :] + noise_px / np.array([cam.fx, cam.fy])
        pg = cam.R0 @ p + cam.t0
        delta = np.cross(cam.omega, cam.R0 @ p) + cam.d
        pc = pg[None, :] + q_noisy[:, 1:2] * delta[None, :]
        e = q_noisy - pc[:, :2] / pc[:, 2:3]
        emp = np.cov(e.T)
        assert np.abs(emp - predicted).max() < 0.05 * np.abs(predicted).max()

    def test_degenerate_raises(self):
        cam, p, obs = degenerate_config()
        C = weight_C(cam, p, obs.q[1])
        with pytest.raises(DegenerateCovariance):
            residual_covariance(C, weight_W(cam), np.eye(2))


class TestWhiten:
    def test_identity_weights(self):
        e = np.array([0.3, -0.7])
        assert np.allclose(whiten(e, np.eye(2), np.eye(2), np.eye(2)), e)

    def test_scalar_covariance(self):
        e = np.array([0.3, -0.7])
        assert np.allclose(whiten(e, np.eye(2), np.eye(2), 4.0 * np.eye(2)), e / 2.0)

    def test_quadratic_form_identity(self, rng):
        for _ in range(25):
            cam = random_camera(rng)
            p = random_scene_point(rng)
            obs = synthetic_observation(cam, p, rng, sigma_px=2.0)
            e = error_nm(cam, p, obs)
            C = weight_C(cam, p, obs.q[1])
            W = weight_W(cam)
            A = rng.standard_normal((2, 2))
            sigma = A @ A.T + 0.5 * np.eye(2)
            ehat = whiten(e, C, W, sigma)
            direct = e @ np.linalg.solve(residual_covariance(C, W, sigma), e)
            assert abs(ehat @ ehat - direct) < 1e-10 * max(1.0, direct)

    def test_degenerate_raises_but_clamp_survives(self):
        cam, p, obs = degenerate_config()
        e = np.array([0.01, 0.02])
        C = weight_C(cam, p, obs.q[1])
        with pytest.raises(DegenerateCovariance):
            whiten(e, C, weight_W(cam), np.eye(2))
        clamped = whiten(e, C, weight_W(cam), np.eye(2), clamp=True)
        assert np.isfinite(clamped).all()
        assert np.abs(clamped).max() > 1e8  # enormous, as the barrier demands


class TestErrorNw:
    def test_zero_at_ground_truth(self, rng, default_prior):
        cam = random_camera(rng)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p)
        assert np.abs(error_nw(cam, p, obs, default_prior)).max() < 1e-7

    def test_zero_motion_collapse(self, rng):
        # with no motion, whitening is just the (focal-scaled) prior factor
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p, rng, sigma_px=1.5)
        prior = NoisePrior.isotropic(2.0)
        e = error_nm(cam, p, obs)
        ehat = error_nw(cam, p, obs, prior)
        expected = np.array([cam.fx, cam.fy]) * e / 2.0
        assert np.abs(ehat - expected).max() < 1e-9 * max(1.0, np.abs(expected).max())


class TestRectifiedPoint:
    def test_first_order_equivalence_richardson(self, rng):
        # reprojecting at the rectified row must reproduce the rectified
        # point up to a discrepancy quadratic in the camera velocities:
        # halving the speeds shrinks it by about four
        ratios = []
        for _ in range(40):
            cam = random_camera(rng, speed_ang=0.25, speed_lin=1.5)
            p = random_scene_point(rng)
            noise = 1.5 * rng.standard_normal(2)

            def discrepancy(scale):
                cs = cam.copy()
                cs.omega = cam.omega * scale
                cs.d = cam.d * scale
                q_true = project_dc(cs, p)
                m = denormalize_measurement(q_true, cs) + noise
                obs = Observation(0, 0, q=normalize_measurement(m, cs), m=m)
                q2 = rectified_point(cs, p, obs)
                reproj = project_rs_normalized(cs, p, q2[1])
                return np.linalg.norm(q2 - reproj)

            d1, d2 = discrepancy(1.0), discrepancy(0.5)
            if d1 > 1e-14:
                ratios.append(d1 / max(d2, 1e-300))
        assert np.median(ratios) > 3.5

    def test_static_rectification_is_projection(self, rng):
        # no motion: the rectified point equals the plain projection
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p, rng, sigma_px=1.0)
        q2 = rectified_point(cam, p, obs)
        assert np.allclose(q2, project_rs_normalized(cam, p, obs.q[1]))


class TestDegeneracyCostOrdering:
    def test_whitened_cost_explodes_at_degeneracy(self, default_prior):
        # the camera sits at the degenerate solution but the point is not
        # exactly on the collapse plane: the unweighted model barely notices
        # while the whitened residual blows up through the vanishing C[1,1]
        cam, p, obs = degenerate_config()
        p_off = p + np.array([0.0, 1e-3, 0.0])
        e_nm = error_nm(cam, p_off, obs)
        e_nw = error_nw(cam, p_off, obs, default_prior, clamp=True)
        assert float(e_nw @ e_nw) > 1e12 * float(e_nm @ e_nm)
