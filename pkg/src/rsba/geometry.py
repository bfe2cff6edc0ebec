"""Rotation utilities, rolling-shutter motion model and projection functions.

Conventions used throughout the package:

* A camera pose (R0, t0) maps world points into the camera frame,
  ``Pc = R0 @ P + t0``; the camera looks down its +z axis.
* Normalized image coordinates ``q = [c, r]`` are pixel coordinates pushed
  through the inverse intrinsics, ``q = [(u - cx)/fx, (v - cy)/fy]``.  The
  second component ``r`` doubles as the row-time coordinate: the reference
  row ``r = 0`` is the principal-point row, and the per-camera velocities
  ``omega`` (angular) and ``d`` (linear) are rates per normalized-row unit.
* Intra-frame motion is first order: the pose at row ``r`` is
  ``((I + hat(omega) * r) @ R0, t0 + d * r)``.  The rotation factor is
  deliberately not re-orthonormalized; the residual weighting and all
  analytical derivatives in this package are built on this exact form.

A camera can also be interpreted in the "direct" (pixel-domain) convention,
where the reference row is the first image row ``v = 0`` and the velocities
are rates per pixel row.  ``camera_to_direct`` converts between the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    AngleNearPi,
    CheiralityViolation,
    DepthZero,
    NoConvergence,
)

# Depth below this is treated as behind the camera.
CHEIRALITY_EPS = 1e-9

_SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, hat(v) @ x == cross(v, x)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(M: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` for a skew-symmetric matrix."""
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def so3_exp(xi: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map from an axis-angle 3-vector to a rotation.

    Below ``1e-8`` the trigonometric coefficients are replaced by their
    second-order Taylor expansions to avoid 0/0.
    """
    xi = np.asarray(xi, dtype=float)
    theta2 = float(xi @ xi)
    theta = np.sqrt(theta2)
    K = hat(xi)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_exp_batch(xi: np.ndarray) -> np.ndarray:
    """Rodrigues map applied row-wise to an (n, 3) array of axis-angles."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 3)
    n = len(xi)
    theta2 = np.einsum("ni,ni->n", xi, xi)
    theta = np.sqrt(theta2)
    K = np.zeros((n, 3, 3))
    K[:, 0, 1] = -xi[:, 2]
    K[:, 0, 2] = xi[:, 1]
    K[:, 1, 0] = xi[:, 2]
    K[:, 1, 2] = -xi[:, 0]
    K[:, 2, 0] = -xi[:, 1]
    K[:, 2, 1] = xi[:, 0]
    small = theta < _SMALL_ANGLE
    safe2 = np.where(small, 1.0, theta2)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.sqrt(safe2))
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / safe2)
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle logarithm of a rotation, canonical with norm <= pi.

    Raises :class:`AngleNearPi` within ``1e-9`` of a half turn, where the
    antisymmetric part vanishes and the formula is singular; callers must
    renormalize their parameterization before logging such a rotation.
    """
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = vee(R - R.T)
    s = np.linalg.norm(w) / 2.0
    # the angle from atan2 keeps theta consistent with the antisymmetric
    # part, which arccos alone loses near the half turn
    theta = float(np.arctan2(s, c))
    if np.pi - theta < 1e-9:
        raise AngleNearPi(f"rotation angle {theta!r} is within 1e-9 of pi")
    if theta < 1e-6:
        # theta / (2 sin theta) ~ 1/2 + theta^2/12
        return (0.5 + theta * theta / 12.0) * w
    return (theta / (2.0 * s)) * w


def is_rotation(R: np.ndarray, tol: float = 1e-12) -> bool:
    """Check orthonormality and unit determinant within ``tol`` (Frobenius)."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return (
        np.linalg.norm(R @ R.T - np.eye(3)) <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


@dataclass
class RsCamera:
    """One camera: pose at the reference row, intra-frame velocities, intrinsics.

    ``R0``/``t0`` hold the pose when the reference row is read out; ``omega``
    and ``d`` are the angular and linear velocity per normalized-row unit
    (per pixel row under the direct convention).  ``fx, fy`` in pixels must
    be positive.
    """

    R0: np.ndarray
    t0: np.ndarray
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fx: float = 1.0
    fy: float = 1.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        self.R0 = np.asarray(self.R0, dtype=float).reshape(3, 3)
        self.t0 = np.asarray(self.t0, dtype=float).reshape(3)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.d = np.asarray(self.d, dtype=float).reshape(3)
        self.fx = float(self.fx)
        self.fy = float(self.fy)
        self.cx = float(self.cx)
        self.cy = float(self.cy)
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")

    def copy(self) -> "RsCamera":
        return replace(
            self,
            R0=self.R0.copy(),
            t0=self.t0.copy(),
            omega=self.omega.copy(),
            d=self.d.copy(),
        )

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates."""
        return -self.R0.T @ self.t0


def perspective_divide(pc: np.ndarray) -> np.ndarray:
    """[X/Z, Y/Z] of a camera-frame point; raises DepthZero for |Z| < 1e-12."""
    pc = np.asarray(pc, dtype=float)
    z = pc[2]
    if abs(z) < 1e-12:
        raise DepthZero(f"depth {z!r} too close to zero")
    return pc[:2] / z


def normalize_measurement(m: np.ndarray, cam: RsCamera) -> np.ndarray:
    """Pixel measurement -> normalized coordinates through the inverse intrinsics."""
    m = np.asarray(m, dtype=float)
    return np.array([(m[0] - cam.cx) / cam.fx, (m[1] - cam.cy) / cam.fy])


def denormalize_measurement(q: np.ndarray, cam: RsCamera) -> np.ndarray:
    """Normalized coordinates -> pixel measurement (inverse of normalize)."""
    q = np.asarray(q, dtype=float)
    return np.array([q[0] * cam.fx + cam.cx, q[1] * cam.fy + cam.cy])


def rs_pose_at_row(cam: RsCamera, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Pose at row-time ``r``: ((I + hat(omega) r) @ R0, t0 + d r).

    The rotation factor is the first-order motion model verbatim and is not
    re-orthonormalized.
    """
    Rr = (np.eye(3) + hat(cam.omega) * r) @ cam.R0
    tr = cam.t0 + cam.d * r
    return Rr, tr


def transform_to_camera(cam: RsCamera, p: np.ndarray, r: float) -> np.ndarray:
    """Camera-frame point at row-time ``r``.

    Affine in ``r``: equals ``R0 @ p + t0 + r * (hat(omega) @ R0 @ p + d)``.
    """
    p = np.asarray(p, dtype=float)
    Rr, tr = rs_pose_at_row(cam, r)
    return Rr @ p + tr


def project_gs(cam: RsCamera, p: np.ndarray) -> np.ndarray:
    """Global-shutter projection: motion ignored, pose at the reference row."""
    return project_rs_normalized(cam, p, 0.0)


def project_rs_normalized(cam: RsCamera, p: np.ndarray, r: float) -> np.ndarray:
    """Normalized projection of ``p`` through the pose at row-time ``r``."""
    pc = transform_to_camera(cam, p, r)
    if pc[2] <= CHEIRALITY_EPS:
        raise CheiralityViolation(f"depth {pc[2]!r} at row {r!r}")
    return pc[:2] / pc[2]


def project_dc(
    cam: RsCamera,
    p: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> np.ndarray:
    """Camera-consistent projection: solve the row at which ``p`` is imaged.

    Fixed-point iteration on ``r = proj_y(Pc(r))`` starting from the
    static projection.  Returns ``[c*, r*]`` with ``c*`` evaluated at the
    converged row.  Raises :class:`NoConvergence` after ``max_iter``
    iterations, which signals an ill-posed camera speed.
    """
    p = np.asarray(p, dtype=float)
    pg = cam.R0 @ p + cam.t0
    delta = np.cross(cam.omega, cam.R0 @ p) + cam.d
    if pg[2] <= CHEIRALITY_EPS:
        raise CheiralityViolation(f"static depth {pg[2]!r}")
    r = pg[1] / pg[2]
    for _ in range(max_iter):
        pc = pg + r * delta
        if pc[2] <= CHEIRALITY_EPS:
            raise CheiralityViolation(f"depth {pc[2]!r} at row {r!r}")
        r_next = pc[1] / pc[2]
        if abs(r_next - r) < tol:
            pc = pg + r_next * delta
            if pc[2] <= CHEIRALITY_EPS:
                raise CheiralityViolation(f"depth {pc[2]!r} at row {r_next!r}")
            return np.array([pc[0] / pc[2], r_next])
        r = r_next
    raise NoConvergence(f"row fixed point did not settle in {max_iter} iterations")


def project_dc_direct(
    cam: RsCamera,
    p: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 50,
) -> np.ndarray:
    """Pixel-domain camera-consistent projection under the direct convention.

    ``cam`` is interpreted with reference row ``v = 0`` and velocities per
    pixel row; the fixed point runs on the pixel row ``v``.  Returns the
    pixel measurement ``[u*, v*]``.
    """
    p = np.asarray(p, dtype=float)
    pg = cam.R0 @ p + cam.t0
    delta = np.cross(cam.omega, cam.R0 @ p) + cam.d
    if pg[2] <= CHEIRALITY_EPS:
        raise CheiralityViolation(f"static depth {pg[2]!r}")
    v = cam.fy * pg[1] / pg[2] + cam.cy
    for _ in range(max_iter):
        pc = pg + v * delta
        if pc[2] <= CHEIRALITY_EPS:
            raise CheiralityViolation(f"depth {pc[2]!r} at pixel row {v!r}")
        v_next = cam.fy * pc[1] / pc[2] + cam.cy
        if abs(v_next - v) < tol:
            pc = pg + v_next * delta
            return np.array([cam.fx * pc[0] / pc[2] + cam.cx, v_next])
        v = v_next
    raise NoConvergence(f"pixel-row fixed point did not settle in {max_iter} iterations")


def camera_to_direct(cam: RsCamera) -> RsCamera:
    """Re-express a normalized-convention camera in the direct convention.

    Moves the reference row from the principal-point row to the first image
    row (exactly, through the exponential map) and rescales the velocities
    from per-normalized-row to per-pixel-row.
    """
    r0 = -cam.cy / cam.fy  # row-time of pixel row v = 0
    R0 = so3_exp(cam.omega * r0) @ cam.R0
    t0 = cam.t0 + cam.d * r0
    return RsCamera(
        R0=R0,
        t0=t0,
        omega=cam.omega / cam.fy,
        d=cam.d / cam.fy,
        fx=cam.fx,
        fy=cam.fy,
        cx=cam.cx,
        cy=cam.cy,
    )


def camera_from_direct(cam: RsCamera) -> RsCamera:
    """Inverse of :func:`camera_to_direct`."""
    omega = cam.omega * cam.fy
    d = cam.d * cam.fy
    r0 = -cam.cy / cam.fy
    R0 = so3_exp(-omega * r0) @ cam.R0
    t0 = cam.t0 - d * r0
    return RsCamera(
        R0=R0, t0=t0, omega=omega, d=d,
        fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
    )
