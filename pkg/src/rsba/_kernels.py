"""Numba kernels for the per-observation residual/Jacobian chain.

One pass over the observations with everything in registers; the numpy
implementation in :mod:`rsba._batch` stays as the importable fallback and
as the cross-check reference in the tests.  Modes: 0 = motion-free,
1 = rolling shutter normalized, 2 = whitened, 3 = pixel domain (direct
convention).
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

MODE = {"gsba": 0, "nm": 1, "nw": 2, "dm": 3}

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def residual_kernel(R0, t0, omega, dvel, fx, fy, cx, cy, points,
                        cam_idx, pt_idx, q, m, mode, Fw00, Fw01, Fw11,
                        e, valid):
        eps = 1e-9
        clamp = 1e-12
        for n in range(cam_idx.shape[0]):
            j = cam_idx[n]
            i = pt_idx[n]
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            rx = R0[j, 0, 0] * px + R0[j, 0, 1] * py + R0[j, 0, 2] * pz
            ry = R0[j, 1, 0] * px + R0[j, 1, 1] * py + R0[j, 1, 2] * pz
            rz = R0[j, 2, 0] * px + R0[j, 2, 1] * py + R0[j, 2, 2] * pz
            if mode == 0:
                dx = dy = dz = 0.0
                r = 0.0
            else:
                wx, wy, wz = omega[j, 0], omega[j, 1], omega[j, 2]
                dx = wy * rz - wz * ry + dvel[j, 0]
                dy = wz * rx - wx * rz + dvel[j, 1]
                dz = wx * ry - wy * rx + dvel[j, 2]
                r = m[n, 1] if mode == 3 else q[n, 1]
            pcx = rx + t0[j, 0] + r * dx
            pcy = ry + t0[j, 1] + r * dy
            pcz = rz + t0[j, 2] + r * dz
            if pcz <= eps:
                valid[n] = False
                e[n, 0] = 0.0
                e[n, 1] = 0.0
                continue
            valid[n] = True
            zinv = 1.0 / pcz
            xn = pcx * zinv
            yn = pcy * zinv
            if mode == 3:
                e0 = m[n, 0] - (fx[j] * xn + cx[j])
                e1 = m[n, 1] - (fy[j] * yn + cy[j])
            else:
                e0 = q[n, 0] - xn
                e1 = q[n, 1] - yn
            if mode == 2:
                alpha = dx * zinv - xn * dz * zinv
                beta = dy * zinv - yn * dz * zinv
                c11 = 1.0 - beta
                if abs(c11) < clamp:
                    c11 = clamp if c11 >= 0.0 else -clamp
                u1 = fx[j] * (e0 + (alpha / c11) * e1)
                u2 = fy[j] * (e1 / c11)
                e0 = Fw00 * u1 + Fw01 * u2
                e1 = Fw11 * u2
            e[n, 0] = e0
            e[n, 1] = e1

    @numba.njit(cache=True)
    def accumulate_kernel(cam_idx, pt_idx, e, jr, jg, jp, has_rs,
                          R, U, S, V, T, W, gt, gu, gv):
        """Block accumulation of J^T J, J^T e and the per-observation
        camera-point couplings, in observation order."""
        for n in range(cam_idx.shape[0]):
            j = cam_idx[n]
            i = pt_idx[n]
            for a in range(6):
                ga0 = jg[n, 0, a]
                ga1 = jg[n, 1, a]
                for b in range(6):
                    U[j, a, b] += ga0 * jg[n, 0, b] + ga1 * jg[n, 1, b]
                for b in range(3):
                    W[n, a, b] = ga0 * jp[n, 0, b] + ga1 * jp[n, 1, b]
                gu[j, a] += ga0 * e[n, 0] + ga1 * e[n, 1]
            for a in range(3):
                pa0 = jp[n, 0, a]
                pa1 = jp[n, 1, a]
                for b in range(3):
                    V[i, a, b] += pa0 * jp[n, 0, b] + pa1 * jp[n, 1, b]
                gv[i, a] += pa0 * e[n, 0] + pa1 * e[n, 1]
            if has_rs:
                for a in range(6):
                    ra0 = jr[n, 0, a]
                    ra1 = jr[n, 1, a]
                    for b in range(6):
                        R[j, a, b] += ra0 * jr[n, 0, b] + ra1 * jr[n, 1, b]
                        S[j, a, b] += ra0 * jg[n, 0, b] + ra1 * jg[n, 1, b]
                    for b in range(3):
                        T[n, a, b] = ra0 * jp[n, 0, b] + ra1 * jp[n, 1, b]
                    gt[j, a] += ra0 * e[n, 0] + ra1 * e[n, 1]

    @numba.njit(cache=True)
    def jacobian_kernel(R0, t0, omega, dvel, fx, fy, cx, cy, points,
                        cam_idx, pt_idx, q, m, mode, Fw00, Fw01, Fw11,
                        e, jr, jg, jp, valid):
        eps = 1e-9
        clamp = 1e-12
        has_rs = mode != 0
        whiten = mode == 2
        pixel = mode == 3
        for n in range(cam_idx.shape[0]):
            j = cam_idx[n]
            i = pt_idx[n]
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            rx = R0[j, 0, 0] * px + R0[j, 0, 1] * py + R0[j, 0, 2] * pz
            ry = R0[j, 1, 0] * px + R0[j, 1, 1] * py + R0[j, 1, 2] * pz
            rz = R0[j, 2, 0] * px + R0[j, 2, 1] * py + R0[j, 2, 2] * pz
            wx = wy = wz = 0.0
            dx = dy = dz = 0.0
            r = 0.0
            if has_rs:
                wx, wy, wz = omega[j, 0], omega[j, 1], omega[j, 2]
                dx = wy * rz - wz * ry + dvel[j, 0]
                dy = wz * rx - wx * rz + dvel[j, 1]
                dz = wx * ry - wy * rx + dvel[j, 2]
                r = m[n, 1] if pixel else q[n, 1]
            pcx = rx + t0[j, 0] + r * dx
            pcy = ry + t0[j, 1] + r * dy
            pcz = rz + t0[j, 2] + r * dz
            if pcz <= eps:
                valid[n] = False
                e[n, 0] = 0.0
                e[n, 1] = 0.0
                for k in range(6):
                    jg[n, 0, k] = 0.0
                    jg[n, 1, k] = 0.0
                    if has_rs:
                        jr[n, 0, k] = 0.0
                        jr[n, 1, k] = 0.0
                for k in range(3):
                    jp[n, 0, k] = 0.0
                    jp[n, 1, k] = 0.0
                continue
            valid[n] = True
            zinv = 1.0 / pcz
            xn = pcx * zinv
            yn = pcy * zinv
            if pixel:
                e0 = m[n, 0] - (fx[j] * xn + cx[j])
                e1 = m[n, 1] - (fy[j] * yn + cy[j])
            else:
                e0 = q[n, 0] - xn
                e1 = q[n, 1] - yn

            # output row mixers: whitened rows, pixel scaling, or identity
            if whiten:
                alpha = dx * zinv - xn * dz * zinv
                beta = dy * zinv - yn * dz * zinv
                c11 = 1.0 - beta
                if abs(c11) < clamp:
                    c11 = clamp if c11 >= 0.0 else -clamp
                ey = e1
                k1 = ey / c11
                k2 = ey * alpha / (c11 * c11)
                ac = alpha / c11
                sx = fx[j] * Fw00
                mixy = fy[j] * Fw01
                sy = fy[j] * Fw11
                u1 = fx[j] * (e0 + ac * e1)
                u2 = fy[j] * (e1 / c11)
                e[n, 0] = Fw00 * u1 + Fw01 * u2
                e[n, 1] = Fw11 * u2
                # gamma-row variation contracted with the row-rate delta
                z2 = zinv * zinv
                g1x = -dz * z2
                g1z = (-dx + 2.0 * xn * dz) * z2
                g2y = -dz * z2
                g2z = (-dy + 2.0 * yn * dz) * z2
            else:
                e[n, 0] = e0
                e[n, 1] = e1

            fxs = fx[j] if pixel else 1.0
            fys = fy[j] if pixel else 1.0

            for k in range(3):
                ek0 = 1.0 if k == 0 else 0.0
                ek1 = 1.0 if k == 1 else 0.0
                ek2 = 1.0 if k == 2 else 0.0
                # hat(rp) column k = rp x e_k
                hx = ry * ek2 - rz * ek1
                hy = rz * ek0 - rx * ek2
                hz = rx * ek1 - ry * ek0
                # Rc column k and w x (that column)
                ck0 = R0[j, 0, k]
                ck1 = R0[j, 1, k]
                ck2 = R0[j, 2, k]
                wc0 = wy * ck2 - wz * ck1
                wc1 = wz * ck0 - wx * ck2
                wc2 = wx * ck1 - wy * ck0
                # w x (hat(rp) column k)
                wh0 = wy * hz - wz * hy
                wh1 = wz * hx - wx * hz
                wh2 = wx * hy - wy * hx

                # --- point block: dPc = Rc_k + r (w x Rc_k), ddelta = w x Rc_k
                dp0 = ck0 + r * wc0
                dp1 = ck1 + r * wc1
                dp2 = ck2 + r * wc2
                de0 = -(dp0 - xn * dp2) * zinv
                de1 = -(dp1 - yn * dp2) * zinv
                if whiten:
                    dab0 = (wc0 - xn * wc2) * zinv + g1x * dp0 + g1z * dp2
                    dab1 = (wc1 - yn * wc2) * zinv + g2y * dp1 + g2z * dp2
                    row1 = (de1 + k1 * dab1) / c11
                    row0 = de0 + ac * de1 + k1 * dab0 + k2 * dab1
                    jp[n, 0, k] = sx * row0 + mixy * row1
                    jp[n, 1, k] = sy * row1
                else:
                    jp[n, 0, k] = fxs * de0
                    jp[n, 1, k] = fys * de1

                # --- rotation block: dPc = -(h + r (w x h)), ddelta = -(w x h)
                dp0 = -(hx + r * wh0)
                dp1 = -(hy + r * wh1)
                dp2 = -(hz + r * wh2)
                de0 = -(dp0 - xn * dp2) * zinv
                de1 = -(dp1 - yn * dp2) * zinv
                if whiten:
                    dab0 = -(wh0 - xn * wh2) * zinv + g1x * dp0 + g1z * dp2
                    dab1 = -(wh1 - yn * wh2) * zinv + g2y * dp1 + g2z * dp2
                    row1 = (de1 + k1 * dab1) / c11
                    row0 = de0 + ac * de1 + k1 * dab0 + k2 * dab1
                    jg[n, 0, k] = sx * row0 + mixy * row1
                    jg[n, 1, k] = sy * row1
                else:
                    jg[n, 0, k] = fxs * de0
                    jg[n, 1, k] = fys * de1

                # --- translation block: dPc = e_k, ddelta = 0
                de0 = -(ek0 - xn * ek2) * zinv
                de1 = -(ek1 - yn * ek2) * zinv
                if whiten:
                    dab0 = g1x * ek0 + g1z * ek2
                    dab1 = g2y * ek1 + g2z * ek2
                    row1 = (de1 + k1 * dab1) / c11
                    row0 = de0 + ac * de1 + k1 * dab0 + k2 * dab1
                    jg[n, 0, 3 + k] = sx * row0 + mixy * row1
                    jg[n, 1, 3 + k] = sy * row1
                else:
                    jg[n, 0, 3 + k] = fxs * de0
                    jg[n, 1, 3 + k] = fys * de1

                if has_rs:
                    # --- angular velocity: dPc = -r h, ddelta = -h
                    de0 = (hx - xn * hz) * zinv * r
                    de1 = (hy - yn * hz) * zinv * r
                    if whiten:
                        dab0 = -(hx - xn * hz) * zinv + g1x * (-r * hx) + g1z * (-r * hz)
                        dab1 = -(hy - yn * hz) * zinv + g2y * (-r * hy) + g2z * (-r * hz)
                        row1 = (de1 + k1 * dab1) / c11
                        row0 = de0 + ac * de1 + k1 * dab0 + k2 * dab1
                        jr[n, 0, k] = sx * row0 + mixy * row1
                        jr[n, 1, k] = sy * row1
                    else:
                        jr[n, 0, k] = fxs * de0
                        jr[n, 1, k] = fys * de1

                    # --- linear velocity: dPc = r e_k, ddelta = e_k
                    de0 = -(ek0 - xn * ek2) * zinv * r
                    de1 = -(ek1 - yn * ek2) * zinv * r
                    if whiten:
                        dab0 = (ek0 - xn * ek2) * zinv + r * (g1x * ek0 + g1z * ek2)
                        dab1 = (ek1 - yn * ek2) * zinv + r * (g2y * ek1 + g2z * ek2)
                        row1 = (de1 + k1 * dab1) / c11
                        row0 = de0 + ac * de1 + k1 * dab0 + k2 * dab1
                        jr[n, 0, 3 + k] = sx * row0 + mixy * row1
                        jr[n, 1, 3 + k] = sy * row1
                    else:
                        jr[n, 0, 3 + k] = fxs * de0
                        jr[n, 1, 3 + k] = fys * de1
