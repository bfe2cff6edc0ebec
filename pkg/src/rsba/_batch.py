"""Vectorized residual and Jacobian evaluation over whole observation sets.

The solver works on a packed array representation of the problem so that a
full pass over hundreds of thousands of observations is a short sequence of
flat numpy operations.  The 3x3 chain products are expanded algebraically
(the projection derivative has four nonzeros; hat(w) @ hat(rp) is an outer
product minus a scaled identity) instead of looping batched matmuls.
Scalar reference implementations live in :mod:`rsba.residuals` and
:mod:`rsba.jacobians`; the test suite pins this module against them.

Methods: "gsba" (motion ignored), "nm" (rolling shutter, normalized),
"nw" (whitened), "dm" (pixel domain; cameras must already be packed in the
direct convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CHEIRALITY_EPS, RsCamera, camera_from_direct, camera_to_direct
from .problem import Problem
from .residuals import DEGENERACY_EPS, whitening_factor

METHODS = ("gsba", "dm", "nm", "nw")


@dataclass
class PackedProblem:
    """Array-of-struct problem layout plus static observation indexing."""

    method: str
    R0: np.ndarray      # (C,3,3)
    t0: np.ndarray      # (C,3)
    omega: np.ndarray   # (C,3)
    d: np.ndarray       # (C,3)
    fx: np.ndarray      # (C,)
    fy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    points: np.ndarray  # (P,3)
    cam_idx: np.ndarray
    pt_idx: np.ndarray
    q: np.ndarray       # (N,2)
    m: np.ndarray | None
    Fw: np.ndarray      # (2,2) upper, Fw^T Fw = Sigma^{-1}

    @classmethod
    def pack(cls, problem: Problem, method: str) -> "PackedProblem":
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        cams = problem.cameras
        if method == "dm":
            cams = [camera_to_direct(c) for c in cams]
            if problem.observations.m is None:
                from .errors import MissingPixelMeasurement

                raise MissingPixelMeasurement("dm method needs pixel measurements")
        obs = problem.observations
        return cls(
            method=method,
            R0=np.stack([c.R0 for c in cams]) if cams else np.zeros((0, 3, 3)),
            t0=np.stack([c.t0 for c in cams]) if cams else np.zeros((0, 3)),
            omega=np.stack([c.omega for c in cams]) if cams else np.zeros((0, 3)),
            d=np.stack([c.d for c in cams]) if cams else np.zeros((0, 3)),
            fx=np.array([c.fx for c in cams]),
            fy=np.array([c.fy for c in cams]),
            cx=np.array([c.cx for c in cams]),
            cy=np.array([c.cy for c in cams]),
            points=problem.points.copy(),
            cam_idx=obs.cam_ids.copy(),
            pt_idx=obs.point_ids.copy(),
            q=obs.q.copy(),
            m=None if obs.m is None else obs.m.copy(),
            Fw=whitening_factor(problem.prior.Sigma),
        )

    @property
    def n_cameras(self) -> int:
        return len(self.fx)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_observations(self) -> int:
        return len(self.cam_idx)

    def cameras(self) -> list[RsCamera]:
        cams = [
            RsCamera(
                R0=self.R0[j], t0=self.t0[j], omega=self.omega[j], d=self.d[j],
                fx=self.fx[j], fy=self.fy[j], cx=self.cx[j], cy=self.cy[j],
            )
            for j in range(self.n_cameras)
        ]
        if self.method == "dm":
            cams = [camera_from_direct(c) for c in cams]
        return cams


def _rows(packed: PackedProblem) -> np.ndarray:
    if packed.method == "gsba":
        return np.zeros(packed.n_observations)
    if packed.method == "dm":
        return packed.m[:, 1]
    return packed.q[:, 1]


def _geometry(packed: PackedProblem):
    """Shared kernel: camera points, row-rates and validity over all observations."""
    ci = packed.cam_idx
    Rc = packed.R0[ci]
    pts = packed.points[packed.pt_idx]
    rp = np.einsum("nij,nj->ni", Rc, pts)
    w = packed.omega[ci]
    if packed.method == "gsba":
        delta = np.zeros_like(rp)
    else:
        delta = np.cross(w, rp) + packed.d[ci]
    r = _rows(packed)
    pc = rp + packed.t0[ci] + r[:, None] * delta
    z = pc[:, 2]
    valid = z > CHEIRALITY_EPS
    zs = np.where(valid, z, 1.0)
    return Rc, rp, w, delta, r, pc, zs, valid


def _base_residual(packed: PackedProblem, pc, zs):
    proj = pc[:, :2] / zs[:, None]
    if packed.method == "dm":
        ci = packed.cam_idx
        f = np.stack([packed.fx[ci], packed.fy[ci]], axis=1)
        c = np.stack([packed.cx[ci], packed.cy[ci]], axis=1)
        return packed.m - (proj * f + c)
    return packed.q - proj


def _row_feedback(packed: PackedProblem, pc, zs, delta):
    """alpha, beta and the clamped C[1,1] of the covariance factor."""
    a = delta[:, 0] / zs - pc[:, 0] * delta[:, 2] / zs**2
    b = delta[:, 1] / zs - pc[:, 1] * delta[:, 2] / zs**2
    c11 = 1.0 - b
    c11 = np.where(np.abs(c11) < DEGENERACY_EPS,
                   np.where(c11 >= 0.0, DEGENERACY_EPS, -DEGENERACY_EPS), c11)
    return a, b, c11


def _kernel_args(packed: PackedProblem):
    from . import _kernels

    m = packed.m if packed.m is not None else packed.q
    return (packed.R0, packed.t0, packed.omega, packed.d,
            packed.fx, packed.fy, packed.cx, packed.cy,
            packed.points, packed.cam_idx, packed.pt_idx, packed.q, m,
            _kernels.MODE[packed.method],
            packed.Fw[0, 0], packed.Fw[0, 1], packed.Fw[1, 1])


def residuals(packed: PackedProblem) -> tuple[np.ndarray, np.ndarray]:
    """Method residual per observation, (N,2), plus the cheirality mask."""
    from . import _kernels

    if _kernels.HAVE_NUMBA:
        N = packed.n_observations
        e = np.empty((N, 2))
        valid = np.empty(N, dtype=np.bool_)
        _kernels.residual_kernel(*_kernel_args(packed), e, valid)
        return e, valid
    return _residuals_numpy(packed)


def _residuals_numpy(packed: PackedProblem) -> tuple[np.ndarray, np.ndarray]:
    _, _, _, delta, _, pc, zs, valid = _geometry(packed)
    e = _base_residual(packed, pc, zs)
    if packed.method == "nw":
        a, _, c11 = _row_feedback(packed, pc, zs, delta)
        e = _whiten_rows(packed, e, a, c11)
    e = np.where(valid[:, None], e, 0.0)
    return e, valid


def cost(packed: PackedProblem) -> float:
    """Half squared norm of the stacked residual; inf on any cheirality violation."""
    e, valid = residuals(packed)
    if not valid.all():
        return np.inf
    return 0.5 * float(np.einsum("ni,ni->", e, e))


def _whiten_rows(packed, e, ca, c11):
    ci = packed.cam_idx
    e1 = e[:, 0] + (ca / c11) * e[:, 1]
    e2 = e[:, 1] / c11
    u1 = packed.fx[ci] * e1
    u2 = packed.fy[ci] * e2
    Fw = packed.Fw
    return np.stack([Fw[0, 0] * u1 + Fw[0, 1] * u2, Fw[1, 1] * u2], axis=1)


def _hat_batch(v: np.ndarray) -> np.ndarray:
    n = len(v)
    H = np.zeros((n, 3, 3))
    H[:, 0, 1] = -v[:, 2]
    H[:, 0, 2] = v[:, 1]
    H[:, 1, 0] = v[:, 2]
    H[:, 1, 2] = -v[:, 0]
    H[:, 2, 0] = -v[:, 1]
    H[:, 2, 1] = v[:, 0]
    return H


def _vecmat(v: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Batched v @ M for v (N,3), M (N,3,3), unrolled over the middle index."""
    return (v[:, 0, None] * M[:, 0, :]
            + v[:, 1, None] * M[:, 1, :]
            + v[:, 2, None] * M[:, 2, :])


def residuals_and_jacobians(packed: PackedProblem):
    """Residuals plus per-observation Jacobian blocks.

    Returns ``(e, jr, jg, jp, valid)`` with shapes (N,2), (N,2,6), (N,2,6),
    (N,2,3).  ``jr`` is None for the gsba method.  Rows failing cheirality
    are zeroed; callers must check ``valid`` before trusting the output.
    """
    from . import _kernels

    if _kernels.HAVE_NUMBA:
        N = packed.n_observations
        has_rs = packed.method != "gsba"
        e = np.empty((N, 2))
        jr = np.empty((N, 2, 6)) if has_rs else np.empty((0, 2, 6))
        jg = np.empty((N, 2, 6))
        jp = np.empty((N, 2, 3))
        valid = np.empty(N, dtype=np.bool_)
        _kernels.jacobian_kernel(*_kernel_args(packed), e, jr, jg, jp, valid)
        return e, (jr if has_rs else None), jg, jp, valid
    return _residuals_and_jacobians_numpy(packed)


def _residuals_and_jacobians_numpy(packed: PackedProblem):
    Rc, rp, w, delta, r, pc, zs, valid = _geometry(packed)
    N = packed.n_observations
    e_base = _base_residual(packed, pc, zs)

    zinv = 1.0 / zs
    xn = pc[:, 0] * zinv
    yn = pc[:, 1] * zinv

    def gamma_times(M):
        """gamma @ M exploiting gamma's four nonzeros; M is (N,3,3)."""
        row0 = (M[:, 0, :] - xn[:, None] * M[:, 2, :]) * zinv[:, None]
        row1 = (M[:, 1, :] - yn[:, None] * M[:, 2, :]) * zinv[:, None]
        return np.stack([row0, row1], axis=1)

    has_rs = packed.method != "gsba"
    hat_rp = _hat_batch(rp)
    if has_rs:
        # hat(w) @ Rc column-wise: each column is w x (that column)
        WR = np.cross(w[:, None, :], np.transpose(Rc, (0, 2, 1)), axis=2)
        WR = np.transpose(WR, (0, 2, 1))
        # hat(w) @ hat(rp) == outer(rp, w) - (w . rp) I
        wdotrp = np.einsum("ni,ni->n", w, rp)
        WH = rp[:, :, None] * w[:, None, :]
        WH[:, 0, 0] -= wdotrp
        WH[:, 1, 1] -= wdotrp
        WH[:, 2, 2] -= wdotrp
        rcol = r[:, None, None]
        dpc_p = Rc + rcol * WR
        dpc_xi = -(hat_rp + rcol * WH)
    else:
        dpc_p = Rc
        dpc_xi = -hat_rp

    de_p = -gamma_times(dpc_p)
    de_xi = -gamma_times(dpc_xi)
    # dPc/dt = I: -gamma itself
    de_t = np.zeros((N, 2, 3))
    de_t[:, 0, 0] = -zinv
    de_t[:, 0, 2] = xn * zinv
    de_t[:, 1, 1] = -zinv
    de_t[:, 1, 2] = yn * zinv
    if has_rs:
        de_w = -r[:, None, None] * gamma_times(-hat_rp)
        de_d = r[:, None, None] * de_t

    if packed.method == "nw":
        a, _, c11 = _row_feedback(packed, pc, zs, delta)
        e = _whiten_rows(packed, e_base, a, c11)

        # variation of gamma's rows contracted with delta:
        # g1 = delta^T dgamma(0)/dPc, g2 = delta^T dgamma(1)/dPc
        dxv, dyv, dzv = delta[:, 0], delta[:, 1], delta[:, 2]
        z2 = zinv * zinv
        zero = np.zeros(N)
        g1 = np.stack([-dzv * z2, zero, (-dxv + 2.0 * xn * dzv) * z2], axis=1)
        g2 = np.stack([zero, -dzv * z2, (-dyv + 2.0 * yn * dzv) * z2], axis=1)

        # whitened block, fused per row:
        #   out0 = Fw00 row0 + Fw01 row1,  out1 = Fw11 row1
        #   row0 = fx (de0 + (a/c11) de1 + k1 dab0 + k2 dab1)
        #   row1 = fy (de1 + k1 dab1) / c11
        # where k1 = e_y / c11 and k2 = e_y a / c11^2 collect the derivative
        # of the inverse row-feedback factor contracted with the residual.
        ci = packed.cam_idx
        ey = e_base[:, 1]
        k1 = (ey / c11)[:, None]
        k2 = (ey * a / (c11 * c11))[:, None]
        ac = (a / c11)[:, None]
        c11c = c11[:, None]
        sx = (packed.fx[ci] * packed.Fw[0, 0])[:, None]
        mix = (packed.fy[ci] * packed.Fw[0, 1])[:, None]
        sy = (packed.fy[ci] * packed.Fw[1, 1])[:, None]

        def whiten_block(de0, de1, dab0, dab1, out):
            row1 = (de1 + k1 * dab1) / c11c
            row0 = de0 + ac * de1 + k1 * dab0 + k2 * dab1
            out[:, 0, :] = sx * row0 + mix * row1
            out[:, 1, :] = sy * row1
            return out

        # per block: de rows and d[alpha;beta] rows, assembled with the
        # sparse-gamma and identity shortcuts
        jp = np.empty((N, 2, 3))
        jxi = np.empty((N, 2, 3))
        jt = np.empty((N, 2, 3))
        jw = np.empty((N, 2, 3))
        jd = np.empty((N, 2, 3))

        gWR = gamma_times(WR)           # gamma @ ddelta/dP
        whiten_block(de_p[:, 0], de_p[:, 1],
                     gWR[:, 0] + _vecmat(g1, dpc_p),
                     gWR[:, 1] + _vecmat(g2, dpc_p), jp)
        gWH = gamma_times(WH)           # gamma @ (hat(w) hat(rp)) = -gamma @ ddelta/dxi
        whiten_block(de_xi[:, 0], de_xi[:, 1],
                     -gWH[:, 0] + _vecmat(g1, dpc_xi),
                     -gWH[:, 1] + _vecmat(g2, dpc_xi), jxi)
        # t: ddelta/dt = 0, dPc/dt = I
        whiten_block(de_t[:, 0], de_t[:, 1], g1, g2, jt)
        gH = gamma_times(hat_rp)        # gamma @ hat(rp) = -gamma @ ddelta/domega
        rc = r[:, None]
        whiten_block(de_w[:, 0], de_w[:, 1],
                     -gH[:, 0] - rc * _vecmat(g1, hat_rp),
                     -gH[:, 1] - rc * _vecmat(g2, hat_rp), jw)
        # d: ddelta/dd = I (gamma @ I is gamma's rows), dPc/dd = r I
        grow0 = np.stack([zinv, zero, -xn * zinv], axis=1)
        grow1 = np.stack([zero, zinv, -yn * zinv], axis=1)
        whiten_block(de_d[:, 0], de_d[:, 1],
                     grow0 + rc * g1, grow1 + rc * g2, jd)
    else:
        e = e_base
        if packed.method == "dm":
            ci = packed.cam_idx
            f = np.stack([packed.fx[ci], packed.fy[ci]], axis=1)[:, :, None]
            de_p, de_xi, de_t = f * de_p, f * de_xi, f * de_t
            if has_rs:
                de_w, de_d = f * de_w, f * de_d
        jp, jxi, jt = de_p, de_xi, de_t
        if has_rs:
            jw, jd = de_w, de_d

    jg = np.concatenate([jxi, jt], axis=2)
    jr = np.concatenate([jw, jd], axis=2) if has_rs else None

    if not valid.all():
        bad = ~valid
        e = np.where(bad[:, None], 0.0, e)
        jg = np.where(bad[:, None, None], 0.0, jg)
        jp = np.where(bad[:, None, None], 0.0, jp)
        if jr is not None:
            jr = np.where(bad[:, None, None], 0.0, jr)
    return e, jr, jg, jp, valid


def first_invalid_observation(packed: PackedProblem) -> int:
    """Index of the first observation violating cheirality, or -1."""
    _, _, _, _, _, _, _, valid = _geometry(packed)
    bad = np.flatnonzero(~valid)
    return int(bad[0]) if len(bad) else -1
