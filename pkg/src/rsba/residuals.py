"""Reprojection-error variants and the residual covariance model.

Four residual flavors share the same scene parameterization:

* ``error_gs``  -- global shutter: motion ignored, normalized domain.
* ``error_dm``  -- rolling shutter, pixel domain, camera interpreted in the
  direct convention (reference row v = 0, velocities per pixel row).
* ``error_nm``  -- rolling shutter, normalized domain, pose evaluated at the
  measured row.
* ``error_nw``  -- the normalized residual whitened by the inverse square
  root of its propagated noise covariance.

The covariance model: pixel noise with prior covariance Sigma enters the
normalized measurement through W = diag(1/fx, 1/fy), and the measured row
feeds back into the projection, which propagates the row noise into both
residual components.  To first order the residual covariance is
``C @ W @ Sigma @ W.T @ C.T`` where the row-feedback factor C is upper
triangular with unit (0,0) entry.  Under planar degeneracy C[1,1] collapses
to zero, so the whitened cost blows up precisely where the unweighted cost
would happily flatten the scene.
"""

from __future__ import annotations

import numpy as np

from .errors import CheiralityViolation, DegenerateCovariance, MissingPixelMeasurement
from .geometry import (
    CHEIRALITY_EPS,
    RsCamera,
    transform_to_camera,
)
from .problem import Observation

# |C[1,1]| below this raises DegenerateCovariance; the solver clamps instead
# so that line searches passing near degeneracy stay finite.
DEGENERACY_EPS = 1e-12


def _camera_point_and_velocity(cam: RsCamera, p: np.ndarray, r: float):
    """Shared kernel: camera point at row r plus its row-rate."""
    p = np.asarray(p, dtype=float)
    rp = cam.R0 @ p
    delta = np.cross(cam.omega, rp) + cam.d
    pc = rp + cam.t0 + r * delta
    if pc[2] <= CHEIRALITY_EPS:
        raise CheiralityViolation(f"depth {pc[2]!r} at row {r!r}")
    return pc, delta


def error_gs(cam: RsCamera, p: np.ndarray, obs: Observation) -> np.ndarray:
    """Global-shutter residual q - proj(R0 P + t0), normalized units."""
    pc, _ = _camera_point_and_velocity(cam, p, 0.0)
    return obs.q - pc[:2] / pc[2]


def error_nm(cam: RsCamera, p: np.ndarray, obs: Observation) -> np.ndarray:
    """Rolling-shutter residual with the pose taken at the measured row.

    Using the measured row makes the residual an explicit function of the
    parameters (no per-observation row solve).
    """
    r = obs.q[1]
    pc, _ = _camera_point_and_velocity(cam, p, r)
    return obs.q - pc[:2] / pc[2]


def error_dm(cam: RsCamera, p: np.ndarray, obs: Observation) -> np.ndarray:
    """Pixel-domain rolling-shutter residual, direct convention.

    ``cam`` is interpreted with reference row v = 0 and velocities per pixel
    row; the pose is evaluated at the measured pixel row.
    """
    if obs.m is None:
        raise MissingPixelMeasurement("direct residual needs the pixel measurement")
    v = obs.m[1]
    pc, _ = _camera_point_and_velocity(cam, p, v)
    proj = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
    return obs.m - proj


def weight_C(cam: RsCamera, p: np.ndarray, r: float) -> np.ndarray:
    """Row-feedback factor of the residual covariance at row ``r``.

    ``C = I - outer(gamma @ delta, [0, 1])`` where gamma is the projection
    derivative at the row-r camera point and delta the camera point's row
    rate.  Always upper triangular with C[0,0] = 1; C[1,1] -> 0 marks planar
    degeneracy.
    """
    pc, delta = _camera_point_and_velocity(cam, p, r)
    x, y, z = pc
    alpha = delta[0] / z - x * delta[2] / z**2
    beta = delta[1] / z - y * delta[2] / z**2
    return np.array([[1.0, -alpha], [0.0, 1.0 - beta]])


def weight_W(cam: RsCamera) -> np.ndarray:
    """Normalization weight diag(1/fx, 1/fy) mapping pixel noise to q-space."""
    return np.diag([1.0 / cam.fx, 1.0 / cam.fy])


def residual_covariance(C: np.ndarray, W: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """First-order covariance C W Sigma W^T C^T of the normalized residual."""
    C = np.asarray(C, dtype=float)
    if abs(C[1, 1]) < DEGENERACY_EPS:
        raise DegenerateCovariance(f"C[1,1] = {C[1, 1]!r}")
    CW = C @ np.asarray(W, dtype=float)
    return CW @ np.asarray(Sigma, dtype=float) @ CW.T


def whitening_factor(Sigma: np.ndarray) -> np.ndarray:
    """Upper-triangular F with F^T F = Sigma^{-1} (transposed Cholesky)."""
    L = np.linalg.cholesky(np.linalg.inv(np.asarray(Sigma, dtype=float)))
    return L.T


def _invert_row_weight(C: np.ndarray, clamp: bool) -> np.ndarray:
    c01 = C[0, 1]
    c11 = C[1, 1]
    if abs(c11) < DEGENERACY_EPS:
        if not clamp:
            raise DegenerateCovariance(f"C[1,1] = {c11!r}")
        c11 = DEGENERACY_EPS if c11 >= 0.0 else -DEGENERACY_EPS
    return np.array([[1.0, -c01 / c11], [0.0, 1.0 / c11]])


def whiten(
    e: np.ndarray,
    C: np.ndarray,
    W: np.ndarray,
    Sigma: np.ndarray,
    clamp: bool = False,
) -> np.ndarray:
    """Standardize a residual: e_hat = F W^{-1} C^{-1} e with F^T F = Sigma^{-1}.

    The result satisfies ``e_hat @ e_hat == e @ inv(C W Sigma W^T C^T) @ e``.
    With ``clamp=True`` a vanishing C[1,1] is clamped to +-1e-12 instead of
    raising, which keeps the cost finite (and enormous) near degeneracy.
    """
    Cinv = _invert_row_weight(np.asarray(C, dtype=float), clamp)
    Winv = np.diag(1.0 / np.diag(np.asarray(W, dtype=float)))
    return whitening_factor(Sigma) @ (Winv @ (Cinv @ np.asarray(e, dtype=float)))


def error_nw(
    cam: RsCamera,
    p: np.ndarray,
    obs: Observation,
    prior,
    clamp: bool = False,
) -> np.ndarray:
    """Whitened rolling-shutter residual (the full weighted model)."""
    r = obs.q[1]
    e = error_nm(cam, p, obs)
    C = weight_C(cam, p, r)
    return whiten(e, C, weight_W(cam), prior.Sigma, clamp=clamp)


def rectified_point(cam: RsCamera, p: np.ndarray, obs: Observation) -> np.ndarray:
    """Virtual measurement equivalent to the whitening correction.

    Shifts the measured point by ``C^{-1} e`` instead of weighting the
    residual: ``q'' = q - C^{-1} (q - proj(r))``.  Reprojecting at the
    rectified row reproduces ``q''`` up to second order in the camera
    velocities, which ties the weighted residual to the camera-consistent
    projection model.
    """
    q = obs.q
    r = q[1]
    pc, delta = _camera_point_and_velocity(cam, p, r)
    x, y, z = pc
    proj = pc[:2] / z
    chi = np.array([delta[0] / z - x * delta[2] / z**2,
                    delta[1] / z - y * delta[2] / z**2])
    denom = 1.0 - chi[1]
    if abs(denom) < DEGENERACY_EPS:
        raise DegenerateCovariance(f"C[1,1] = {denom!r}")
    step = (proj[1] - q[1]) / denom
    return np.array([proj[0] + chi[0] * step, q[1] + step])
