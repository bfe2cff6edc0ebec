import numpy as np
import pytest

from rsba.errors import AngleNearPi, CheiralityViolation, DepthZero, NoConvergence
from rsba.geometry import (
    RsCamera,
    camera_from_direct,
    camera_to_direct,
    denormalize_measurement,
    hat,
    is_rotation,
    normalize_measurement,
    perspective_divide,
    project_dc,
    project_dc_direct,
    project_gs,
    project_rs_normalized,
    rs_pose_at_row,
    so3_exp,
    so3_log,
    transform_to_camera,
)

from conftest import random_camera, random_scene_point


def static_camera(**kw):
    defaults = dict(R0=np.eye(3), t0=np.zeros(3), fx=1.0, fy=1.0, cx=0.0, cy=0.0)
    defaults.update(kw)
    return RsCamera(**defaults)


class TestSo3:
    def test_exp_identity(self):
        assert np.allclose(so3_exp([0.0, 0.0, 0.0]), np.eye(3))

    def test_exp_half_turn_x(self):
        R = so3_exp([np.pi, 0.0, 0.0])
        assert np.abs(R - np.diag([1.0, -1.0, -1.0])).max() < 1e-12

    def test_log_identity(self):
        assert np.allclose(so3_log(np.eye(3)), np.zeros(3))

    def test_log_half_turn_raises(self):
        with pytest.raises(AngleNearPi):
            so3_log(np.diag([1.0, -1.0, -1.0]))

    def test_roundtrip_exp_then_log(self):
        xi = np.array([0.1, 0.2, -0.05])
        assert np.abs(so3_log(so3_exp(xi)) - xi).max() < 1e-12

    def test_roundtrip_fixed_norm(self, rng):
        # log implemented independently: theta from the trace, axis from the
        # antisymmetric part; roundtrip pins the exponential
        for _ in range(50):
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            xi = 0.3 * axis
            assert np.abs(so3_log(so3_exp(xi)) - xi).max() < 1e-12

    def test_roundtrip_near_pi(self, rng):
        for _ in range(20):
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            xi = (np.pi - 1e-3) * axis
            assert np.abs(so3_log(so3_exp(xi)) - xi).max() < 1e-10

    def test_small_angle_branch(self):
        xi = np.array([1e-10, -2e-10, 5e-11])
        R = so3_exp(xi)
        assert is_rotation(R, tol=1e-12)
        assert np.abs(so3_log(R) - xi).max() < 1e-18

    def test_exp_returns_rotation(self, rng):
        for _ in range(20):
            R = so3_exp(rng.uniform(-2.0, 2.0, size=3))
            assert is_rotation(R, tol=1e-12)

    def test_hat_cross_product(self, rng):
        v, w = rng.standard_normal(3), rng.standard_normal(3)
        assert np.allclose(hat(v) @ w, np.cross(v, w))


class TestProjectionBasics:
    def test_perspective_divide(self):
        assert np.allclose(perspective_divide([2.0, 4.0, 2.0]), [1.0, 2.0])
        assert np.allclose(perspective_divide([0.0, 0.0, 1.0]), [0.0, 0.0])

    def test_perspective_divide_zero_depth(self):
        with pytest.raises(DepthZero):
            perspective_divide([1.0, 1.0, 0.0])

    def test_normalize_principal_point(self):
        cam = static_camera(fx=1000.0, fy=1000.0, cx=640.0, cy=540.0)
        assert np.allclose(normalize_measurement([640.0, 540.0], cam), [0.0, 0.0])
        assert np.allclose(normalize_measurement([1640.0, 540.0], cam), [1.0, 0.0])

    def test_normalize_denormalize_roundtrip(self, rng):
        cam = static_camera(fx=1234.5, fy=987.6, cx=633.1, cy=512.9)
        for _ in range(20):
            m = rng.uniform(0.0, 1280.0, size=2)
            back = denormalize_measurement(normalize_measurement(m, cam), cam)
            assert np.abs(back - m).max() < 1e-12


class TestRsPose:
    def test_reference_row(self, rng):
        cam = random_camera(rng)
        R, t = rs_pose_at_row(cam, 0.0)
        assert np.allclose(R, cam.R0) and np.allclose(t, cam.t0)

    def test_static_camera_any_row(self, rng):
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        R, t = rs_pose_at_row(cam, 0.37)
        assert np.allclose(R, cam.R0) and np.allclose(t, cam.t0)

    def test_direct_substitution(self):
        cam = static_camera(omega=[0.0, 0.0, 0.01], d=[1.0, 0.0, 0.0])
        R, t = rs_pose_at_row(cam, 0.5)
        assert np.allclose(R, np.eye(3) + 0.5 * hat([0.0, 0.0, 0.01]))
        assert np.allclose(t, [0.5, 0.0, 0.0])

    def test_affine_in_row(self, rng):
        cam = random_camera(rng)
        r1, r2 = 0.25, 0.75
        R1, t1 = rs_pose_at_row(cam, r1)
        R2, t2 = rs_pose_at_row(cam, r2)
        Rm, tm = rs_pose_at_row(cam, (r1 + r2) / 2.0)
        assert np.abs(R1 + R2 - 2.0 * Rm).max() < 1e-15
        assert np.abs(t1 + t2 - 2.0 * tm).max() < 1e-15

    def test_first_order_rotation_not_orthonormalized(self):
        cam = static_camera(omega=[0.2, 0.0, 0.0])
        R, _ = rs_pose_at_row(cam, 0.5)
        # I + hat(w) r is not orthonormal and must be kept that way
        assert not is_rotation(R, tol=1e-6)


class TestProjectRs:
    def test_static_reduces_to_gs(self):
        cam = static_camera()
        for r in [0.0, -0.3, 0.8]:
            assert np.allclose(project_rs_normalized(cam, [1.0, 2.0, 4.0], r), [0.25, 0.5])

    def test_gs_equivalence_random(self, rng):
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        p = random_scene_point(rng)
        q_any_row = project_rs_normalized(cam, p, r=0.42)
        assert np.allclose(q_any_row, project_gs(cam, p), atol=0.0)

    def test_cheirality(self):
        cam = static_camera()
        with pytest.raises(CheiralityViolation):
            project_rs_normalized(cam, [0.0, 0.0, -1.0], 0.0)

    def test_exposes_camera_point(self, rng):
        cam = random_camera(rng)
        p = random_scene_point(rng)
        pc = transform_to_camera(cam, p, 0.2)
        assert np.allclose(project_rs_normalized(cam, p, 0.2), pc[:2] / pc[2])


class TestProjectDc:
    def test_static_is_gs(self, rng):
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        p = random_scene_point(rng)
        assert np.abs(project_dc(cam, p) - project_gs(cam, p)).max() < 1e-15

    def test_fixed_point_self_consistency(self, rng):
        for _ in range(20):
            cam = random_camera(rng)
            p = random_scene_point(rng)
            q = project_dc(cam, p)
            # converged row reprojects onto itself
            back = project_rs_normalized(cam, p, q[1])
            assert abs(back[1] - q[1]) < 1e-10
            assert abs(back[0] - q[0]) < 1e-10

    def test_geometric_contraction(self, rng):
        # successive row updates shrink geometrically at sweep-range speeds
        for _ in range(10):
            cam = random_camera(rng, speed_ang=0.3, speed_lin=1.8)
            p = random_scene_point(rng)
            pg = cam.R0 @ p + cam.t0
            delta = np.cross(cam.omega, cam.R0 @ p) + cam.d
            r = pg[1] / pg[2]
            diffs = []
            for _ in range(8):
                pc = pg + r * delta
                r_next = pc[1] / pc[2]
                diffs.append(abs(r_next - r))
                r = r_next
            diffs = [x for x in diffs if x > 1e-15]
            for a, b in zip(diffs, diffs[1:]):
                assert b <= 0.6 * a

    def test_no_convergence_for_absurd_speed(self):
        cam = static_camera(d=[0.0, 50.0, 0.0], t0=np.array([0.0, 0.0, 5.0]))
        with pytest.raises((NoConvergence, CheiralityViolation)):
            project_dc(cam, [0.0, 1.0, 0.0])


class TestDirectConvention:
    def test_roundtrip(self, rng):
        cam = random_camera(rng)
        back = camera_from_direct(camera_to_direct(cam))
        assert np.abs(back.R0 - cam.R0).max() < 1e-12
        assert np.abs(back.t0 - cam.t0).max() < 1e-12
        assert np.abs(back.omega - cam.omega).max() < 1e-12
        assert np.abs(back.d - cam.d).max() < 1e-12

    def test_direct_projection_consistency(self, rng):
        # the pixel-row fixed point satisfies its own self-consistency
        cam = camera_to_direct(random_camera(rng))
        p = random_scene_point(rng)
        m = project_dc_direct(cam, p)
        pc = transform_to_camera(cam, p, m[1])
        assert abs(cam.fy * pc[1] / pc[2] + cam.cy - m[1]) < 1e-7

    def test_static_conventions_agree(self, rng):
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        camd = camera_to_direct(cam)
        p = random_scene_point(rng)
        q = project_gs(cam, p)
        m = project_dc_direct(camd, p)
        assert np.abs(denormalize_measurement(q, cam) - m).max() < 1e-9


class TestRsCamera:
    def test_focal_validation(self):
        with pytest.raises(ValueError):
            RsCamera(R0=np.eye(3), t0=np.zeros(3), fx=0.0, fy=1.0)

    def test_center(self, rng):
        cam = random_camera(rng)
        assert np.abs(cam.R0 @ cam.center + cam.t0).max() < 1e-12
