"""Analytical Jacobian of the whitened residual, plus a finite-difference oracle.

Each observation contributes a 2x15 Jacobian split into five 2x3 blocks:
point position, rotation (left tangent perturbation R <- Exp(dxi) @ R0),
translation, angular velocity and linear velocity.  The whitened residual is
``e_hat = F W^{-1} C^{-1} e``, so every block carries a correction from the
parameter dependence of the row-feedback factor C in addition to the plain
projection chain.

Rotation derivatives use the left perturbation throughout; the solver's
update step applies increments the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import DegenerateCovariance
from .geometry import CHEIRALITY_EPS, RsCamera, hat, so3_exp
from .problem import Observation
from .residuals import DEGENERACY_EPS, error_nw, whitening_factor
from .errors import CheiralityViolation

_BLOCKS = ("J_p", "J_xi", "J_t", "J_omega", "J_d")


@dataclass
class ObservationJacobian:
    """The five 2x3 blocks of one observation's whitened-residual Jacobian."""

    J_p: np.ndarray
    J_xi: np.ndarray
    J_t: np.ndarray
    J_omega: np.ndarray
    J_d: np.ndarray

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _BLOCKS}

    def stacked(self) -> np.ndarray:
        """2x15 row in solver order: [omega, d | xi, t | point]."""
        return np.hstack([self.J_omega, self.J_d, self.J_xi, self.J_t, self.J_p])


def jac_observation(
    cam: RsCamera,
    p: np.ndarray,
    obs: Observation,
    prior,
    clamp: bool = False,
) -> ObservationJacobian:
    """Analytical Jacobian of the whitened residual for one observation."""
    p = np.asarray(p, dtype=float)
    r = obs.q[1]
    rp = cam.R0 @ p
    delta = np.cross(cam.omega, rp) + cam.d
    pc = rp + cam.t0 + r * delta
    x, y, z = pc
    if z <= CHEIRALITY_EPS:
        raise CheiralityViolation(f"depth {z!r} at row {r!r}")

    gamma = np.array([[1.0 / z, 0.0, -x / z**2],
                      [0.0, 1.0 / z, -y / z**2]])
    alpha = gamma[0] @ delta
    beta = gamma[1] @ delta
    c11 = 1.0 - beta
    if abs(c11) < DEGENERACY_EPS:
        if not clamp:
            raise DegenerateCovariance(f"C[1,1] = {c11!r}")
        c11 = DEGENERACY_EPS if c11 >= 0.0 else -DEGENERACY_EPS
    Cinv = np.array([[1.0, alpha / c11], [0.0, 1.0 / c11]])

    e = obs.q - pc[:2] / z
    A = whitening_factor(prior.Sigma) @ np.diag([cam.fx, cam.fy])  # F W^{-1}

    # Derivatives of gamma's rows w.r.t. the camera point.
    G1 = np.array([[0.0, 0.0, -1.0 / z**2],
                   [0.0, 0.0, 0.0],
                   [-1.0 / z**2, 0.0, 2.0 * x / z**3]])
    G2 = np.array([[0.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0 / z**2],
                   [0.0, -1.0 / z**2, 2.0 * y / z**3]])

    hat_w = hat(cam.omega)
    hat_rp = hat(rp)
    motion = np.eye(3) + hat_w * r
    I3 = np.eye(3)
    Z3 = np.zeros((3, 3))

    # (dPc/dx, ddelta/dx) per parameter block.
    chains = {
        "J_p": (motion @ cam.R0, hat_w @ cam.R0),
        "J_xi": (-motion @ hat_rp, -hat_w @ hat_rp),
        "J_t": (I3, Z3),
        "J_omega": (-r * hat_rp, -hat_rp),
        "J_d": (r * I3, I3),
    }

    out = {}
    for name, (dpc, ddelta) in chains.items():
        de = -gamma @ dpc
        # d[alpha;beta]/dx: product rule through gamma(Pc) and delta.
        dab = gamma @ ddelta + np.vstack([delta @ G1 @ dpc, delta @ G2 @ dpc])
        corr = np.vstack([
            e[1] * (c11 * dab[0] + alpha * dab[1]) / c11**2,
            e[1] * dab[1] / c11**2,
        ])
        out[name] = A @ (Cinv @ de + corr)
    return ObservationJacobian(**out)


def central_difference(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    h: float,
) -> np.ndarray:
    """Central finite differences of a vector function, one column per coordinate."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        cols.append((f(x + step) - f(x - step)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def jac_finite_difference(
    cam: RsCamera,
    p: np.ndarray,
    obs: Observation,
    prior,
    h: float = 1e-6,
    clamp: bool = False,
) -> ObservationJacobian:
    """Finite-difference oracle for :func:`jac_observation`.

    Central differences over all fifteen coordinates; the rotation is
    perturbed on the left, R <- Exp(+-h e_i) @ R0.
    """
    p = np.asarray(p, dtype=float)

    def res_point(v):
        return error_nw(cam, v, obs, prior, clamp=clamp)

    def res_xi(v):
        return error_nw(replace(cam, R0=so3_exp(v) @ cam.R0), p, obs, prior, clamp=clamp)

    def res_t(v):
        return error_nw(replace(cam, t0=v), p, obs, prior, clamp=clamp)

    def res_omega(v):
        return error_nw(replace(cam, omega=v), p, obs, prior, clamp=clamp)

    def res_d(v):
        return error_nw(replace(cam, d=v), p, obs, prior, clamp=clamp)

    return ObservationJacobian(
        J_p=central_difference(res_point, p, h),
        J_xi=central_difference(res_xi, np.zeros(3), h),
        J_t=central_difference(res_t, cam.t0, h),
        J_omega=central_difference(res_omega, cam.omega, h),
        J_d=central_difference(res_d, cam.d, h),
    )


def compare_jacobians(
    analytical: ObservationJacobian,
    reference: ObservationJacobian,
) -> dict[str, tuple[float, float]]:
    """Per-block (max absolute difference, block magnitude)."""
    errs = {}
    for name in _BLOCKS:
        a = getattr(analytical, name)
        b = getattr(reference, name)
        errs[name] = (float(np.abs(a - b).max()), float(np.abs(a).max()))
    return errs


def sample_observation_case(rng):
    """One seeded camera/point/observation spanning the experiment ranges.

    Camera on a 20-unit sphere looking at the origin, angular speed up to
    0.32 rad and linear speed up to 1.9 units per row unit (the 0-20
    deg/frame and 0-2 units/frame sweeps at focal 1000 / height 1080),
    pixel noise up to 2 px.  Draws are rejected while the covariance factor
    is close to singular, where the residual itself is not differentiable
    in a useful sense.
    """
    from .geometry import denormalize_measurement, normalize_measurement, project_dc
    from .problem import Observation

    while True:
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        center = 20.0 * direction
        z = -direction
        up = np.array([0.0, 1.0, 0.0])
        if abs(z @ up) > 0.95:
            up = np.array([1.0, 0.0, 0.0])
        x = np.cross(up, z)
        x /= np.linalg.norm(x)
        R0 = so3_exp(0.05 * rng.standard_normal(3)) @ np.stack([x, np.cross(z, x), z])
        w = rng.standard_normal(3)
        w *= rng.uniform(0.0, 0.32) / np.linalg.norm(w)
        d = rng.standard_normal(3)
        d *= rng.uniform(0.0, 1.9) / np.linalg.norm(d)
        cam = RsCamera(R0=R0, t0=-R0 @ center, omega=w, d=d,
                       fx=1000.0, fy=1000.0, cx=640.0, cy=540.0)
        p = rng.uniform(-5.0, 5.0, size=3)
        try:
            q = project_dc(cam, p)
        except Exception:
            continue
        m = denormalize_measurement(q, cam) + rng.uniform(0.0, 2.0) * rng.standard_normal(2)
        obs = Observation(0, 0, q=normalize_measurement(m, cam), m=m)
        from .residuals import weight_C

        if abs(weight_C(cam, p, obs.q[1])[1, 1]) > 1e-3:
            return cam, p, obs


def run_jacobian_check(
    trials: int = 1000,
    seed: int = 0,
    h: float = 1e-5,
    prior=None,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-8,
):
    """Analytical-vs-oracle comparison over seeded observations.

    Returns ``(per_block, ok)`` where per_block maps a block name to its
    worst (absolute difference, magnitude) pair over all trials.  The step
    1e-5 balances the oracle's truncation against roundoff at the whitened
    residual's scale.
    """
    from .problem import NoisePrior

    rng = np.random.default_rng(seed)
    prior = prior or NoisePrior.isotropic(1.0)
    worst = {name: {"diff": 0.0, "mag": 0.0, "rel": 0.0} for name in _BLOCKS}
    ok = True
    for _ in range(trials):
        cam, p, obs = sample_observation_case(rng)
        errs = compare_jacobians(
            jac_observation(cam, p, obs, prior),
            jac_finite_difference(cam, p, obs, prior, h=h),
        )
        ok = ok and blocks_agree(errs, rel_tol=rel_tol, abs_tol=abs_tol)
        for name, (diff, mag) in errs.items():
            rel = diff / max(mag, 1.0)
            if rel > worst[name]["rel"]:
                worst[name] = {"diff": diff, "mag": mag, "rel": rel}
    return worst, ok


def blocks_agree(
    errs: dict[str, tuple[float, float]],
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-8,
) -> bool:
    """Blockwise agreement: absolute tolerance for small blocks, relative
    for large ones (per-block allclose semantics)."""
    for diff, mag in errs.values():
        if not (diff < abs_tol or (mag > 0.0 and diff / mag < rel_tol)):
            return False
    return True
