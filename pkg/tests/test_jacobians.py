import numpy as np
import pytest

from rsba.errors import DegenerateCovariance
from rsba.geometry import RsCamera, so3_exp
from rsba.jacobians import (
    ObservationJacobian,
    blocks_agree,
    central_difference,
    compare_jacobians,
    jac_finite_difference,
    jac_observation,
)
from rsba.problem import NoisePrior
from rsba.residuals import error_nw, weight_W, whitening_factor

from conftest import random_camera, random_scene_point, synthetic_observation


def seeded_case(rng, speed_ang=None, speed_lin=None, sigma_px=1.0):
    speed_ang = rng.uniform(0.0, 0.3) if speed_ang is None else speed_ang
    speed_lin = rng.uniform(0.0, 1.8) if speed_lin is None else speed_lin
    cam = random_camera(rng, speed_ang=speed_ang, speed_lin=speed_lin)
    p = random_scene_point(rng)
    obs = synthetic_observation(cam, p, rng, sigma_px=sigma_px)
    return cam, p, obs


class TestAgainstFiniteDifferences:
    def test_random_cases(self, rng, default_prior):
        worst = 0.0
        for _ in range(200):
            cam, p, obs = seeded_case(rng)
            ja = jac_observation(cam, p, obs, default_prior)
            jf = jac_finite_difference(cam, p, obs, default_prior)
            errs = compare_jacobians(ja, jf)
            assert blocks_agree(errs, rel_tol=1e-5, abs_tol=1e-8), errs
            worst = max(worst, max(d / max(m, 1.0) for d, m in errs.values()))
        assert worst < 1e-4

    def test_anisotropic_prior(self, rng):
        prior = NoisePrior(np.array([[2.0, 0.5], [0.5, 1.0]]))
        for _ in range(20):
            cam, p, obs = seeded_case(rng)
            errs = compare_jacobians(
                jac_observation(cam, p, obs, prior),
                jac_finite_difference(cam, p, obs, prior),
            )
            assert blocks_agree(errs), errs

    def test_gradient_consistency(self, rng, default_prior):
        # J^T e_hat equals the finite-difference gradient of the half
        # squared norm, parameter block by parameter block
        for _ in range(20):
            cam, p, obs = seeded_case(rng)
            ja = jac_observation(cam, p, obs, default_prior)
            ehat = error_nw(cam, p, obs, default_prior)
            g_point = ja.J_p.T @ ehat

            def half_cost(v):
                e = error_nw(cam, v, obs, default_prior)
                return np.array([0.5 * float(e @ e)])

            g_fd = central_difference(half_cost, p, 1e-6)[0]
            scale = max(1.0, np.abs(g_fd).max())
            assert np.abs(g_point - g_fd).max() < 1e-6 * scale


class TestStructure:
    def test_zero_motion_relations_at_truth(self, rng):
        # noiseless observation, no motion: the velocity blocks are the
        # row-scaled pose blocks and the point block is the classic
        # global-shutter one
        cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
        p = random_scene_point(rng)
        obs = synthetic_observation(cam, p)
        prior = NoisePrior.isotropic(1.0)
        ja = jac_observation(cam, p, obs, prior)
        r = obs.q[1]
        assert np.abs(ja.J_omega - r * ja.J_xi).max() < 1e-12 * max(1.0, np.abs(ja.J_xi).max())
        assert np.abs(ja.J_d - r * ja.J_t).max() < 1e-12 * max(1.0, np.abs(ja.J_t).max())

        pc = cam.R0 @ p + cam.t0
        x, y, z = pc
        gamma = np.array([[1 / z, 0.0, -x / z**2], [0.0, 1 / z, -y / z**2]])
        A = whitening_factor(prior.Sigma) @ np.diag([cam.fx, cam.fy])
        assert np.abs(ja.J_p - A @ (-gamma @ cam.R0)).max() < 1e-12

    def test_translation_block_at_zero_residual(self, rng, default_prior):
        # at a zero residual every weight-variation correction vanishes, so
        # the translation block is exactly the whitened projection chain
        cam, p, obs = seeded_case(rng, sigma_px=0.0)
        ja = jac_observation(cam, p, obs, default_prior)
        r = obs.q[1]
        rp = cam.R0 @ p
        delta = np.cross(cam.omega, rp) + cam.d
        pc = rp + cam.t0 + r * delta
        x, y, z = pc
        gamma = np.array([[1 / z, 0.0, -x / z**2], [0.0, 1 / z, -y / z**2]])
        alpha = gamma[0] @ delta
        beta = gamma[1] @ delta
        Cinv = np.array([[1.0, alpha / (1 - beta)], [0.0, 1.0 / (1 - beta)]])
        A = whitening_factor(default_prior.Sigma) @ np.diag([cam.fx, cam.fy])
        expected = A @ (Cinv @ (-gamma))
        assert np.abs(ja.J_t - expected).max() < 1e-9 * max(1.0, np.abs(expected).max())

    def test_all_blocks_finite(self, rng, default_prior):
        for _ in range(50):
            cam, p, obs = seeded_case(rng)
            ja = jac_observation(cam, p, obs, default_prior)
            for block in ja.blocks().values():
                assert np.isfinite(block).all()

    def test_stacked_layout(self, rng, default_prior):
        cam, p, obs = seeded_case(rng)
        ja = jac_observation(cam, p, obs, default_prior)
        J = ja.stacked()
        assert J.shape == (2, 15)
        assert np.allclose(J[:, 0:3], ja.J_omega)
        assert np.allclose(J[:, 3:6], ja.J_d)
        assert np.allclose(J[:, 6:9], ja.J_xi)
        assert np.allclose(J[:, 9:12], ja.J_t)
        assert np.allclose(J[:, 12:15], ja.J_p)

    def test_degenerate_raises(self, default_prior):
        from test_residuals import degenerate_config

        cam, p, obs = degenerate_config()
        with pytest.raises(DegenerateCovariance):
            jac_observation(cam, p, obs, default_prior)


class TestFiniteDifferenceOracle:
    def test_exact_on_affine_function(self, rng):
        # an affine map has no truncation error: the central difference is
        # exact to roundoff
        A = rng.standard_normal((2, 3))
        b = rng.standard_normal(2)

        def f(x):
            return A @ x + b

        x0 = rng.standard_normal(3)
        J = central_difference(f, x0, 1e-6)
        assert np.abs(J - A).max() < 1e-9

    def test_h_refinement_order(self, rng, default_prior):
        # truncation error drops roughly quadratically before hitting
        # roundoff; the coarse estimate must be much worse than the fine one
        ratios = []
        for _ in range(10):
            cam, p, obs = seeded_case(rng)
            ja = jac_observation(cam, p, obs, default_prior)
            e_coarse = compare_jacobians(ja, jac_finite_difference(cam, p, obs, default_prior, h=1e-4))
            e_fine = compare_jacobians(ja, jac_finite_difference(cam, p, obs, default_prior, h=1e-6))
            c = max(d for d, _ in e_coarse.values())
            f = max(d for d, _ in e_fine.values())
            ratios.append(c / max(f, 1e-300))
        assert np.median(ratios) > 10.0

    def test_left_perturbation_convention(self, rng, default_prior):
        # perturbing on the right instead must disagree with the analytical
        # rotation block for a generic pose
        from dataclasses import replace

        for _ in range(5):
            cam, p, obs = seeded_case(rng)
            ja = jac_observation(cam, p, obs, default_prior)

            def res_xi_right(v):
                return error_nw(replace(cam, R0=cam.R0 @ so3_exp(v)), p, obs, default_prior)

            j_right = central_difference(res_xi_right, np.zeros(3), 1e-6)
            if np.abs(ja.J_xi - j_right).max() > 1e-3 * max(1.0, np.abs(ja.J_xi).max()):
                return
        pytest.fail("right perturbation unexpectedly matched the left-convention block")
