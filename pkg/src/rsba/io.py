"""Bit-exact text serialization of problems (RSBAL v1).

Layout, UTF-8 with LF endings, '#' lines are comments::

    RSBAL v1 units=normalized-row
    <n_cameras> <n_points> <n_observations>
    <cam_id> <point_id> <u> <v>          one line per observation (pixels)
    ...
    <xi(3)> <t0(3)> <omega(3)> <d(3)> <fx> <fy>     per camera, line 1
    <cx> <cy>                                        per camera, line 2
    <R0 row-major (9)>                               per camera, line 3
    ...
    <x> <y> <z>                          one line per point
    <s11> <s12> <s22>                    noise prior (optional on read)

Numbers carry 17 significant digits, which round-trips doubles exactly and
makes serialization canonical: equal problems produce byte-identical files.
The axis-angle is the documented compact rotation record (singular at a
half turn), but log/exp round-trips perturb the last bits, so the rotation
matrix itself is stored alongside and is authoritative on read; the
axis-angle is checked against it.  Velocities are stored per normalized-row
unit, as flagged in the header.

Normalized measurements are not stored: they are re-derived from the pixel
measurement through each camera's intrinsics, which reproduces them bit for
bit because observations are required to satisfy q = normalize(m) on write.
"""

from __future__ import annotations

import numpy as np

from .errors import CountMismatch, IdOutOfRange, MissingPixelMeasurement, ParseError
from .geometry import RsCamera, is_rotation, so3_exp, so3_log
from .problem import NoisePrior, ObservationSet, Problem

HEADER = "RSBAL v1 units=normalized-row"
_NUM = "%.17g"


def _fmt(values) -> str:
    return " ".join(_NUM % v for v in values)


def write_problem(problem: Problem, path) -> None:
    """Serialize canonically; fails loud on inconsistent observations."""
    problem.validate_ids()
    obs = problem.observations
    if len(obs) and obs.m is None:
        raise MissingPixelMeasurement("serialization stores pixel measurements")
    for arr in (problem.points, obs.q if len(obs) else np.zeros(0)):
        if not np.isfinite(arr).all():
            raise ValueError("non-finite values are not serializable")
    if len(obs):
        fx = np.array([problem.cameras[j].fx for j in obs.cam_ids])
        fy = np.array([problem.cameras[j].fy for j in obs.cam_ids])
        cx = np.array([problem.cameras[j].cx for j in obs.cam_ids])
        cy = np.array([problem.cameras[j].cy for j in obs.cam_ids])
        q = np.stack([(obs.m[:, 0] - cx) / fx, (obs.m[:, 1] - cy) / fy], axis=1)
        if np.abs(q - obs.q).max() > 1e-12:
            raise ValueError("observation q is not the normalization of m")

    lines = [HEADER, f"{problem.n_cameras} {problem.n_points} {problem.n_observations}"]
    lines.append("# observations: cam_id point_id u v")
    for i in range(len(obs)):
        lines.append(
            f"{obs.cam_ids[i]} {obs.point_ids[i]} " + _fmt(obs.m[i])
        )
    lines.append("# cameras: xi t0 omega d fx fy / cx cy / R0 row-major")
    for cam in problem.cameras:
        xi = so3_log(cam.R0)
        lines.append(_fmt([*xi, *cam.t0, *cam.omega, *cam.d, cam.fx, cam.fy]))
        lines.append(_fmt([cam.cx, cam.cy]))
        lines.append(_fmt(cam.R0.reshape(-1)))
    lines.append("# points: x y z")
    for p in problem.points:
        lines.append(_fmt(p))
    lines.append("# noise prior: s11 s12 s22")
    S = problem.prior.Sigma
    lines.append(_fmt([S[0, 0], S[0, 1], S[1, 1]]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


class _Records:
    """Token stream over non-comment lines, tracking 1-based line numbers."""

    def __init__(self, text: str):
        self.lines = text.split("\n")
        self.pos = 0

    def next(self, expect: str):
        while self.pos < len(self.lines):
            self.pos += 1
            raw = self.lines[self.pos - 1]
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            return self.pos, stripped.split()
        raise ParseError(self.pos + 1, f"unexpected end of file, expected {expect}")

    def exhausted(self) -> int | None:
        while self.pos < len(self.lines):
            self.pos += 1
            stripped = self.lines[self.pos - 1].strip()
            if stripped and not stripped.startswith("#"):
                return self.pos
        return None


def _ints(line: int, toks: list[str], n: int, what: str) -> list[int]:
    if len(toks) != n:
        raise ParseError(line, f"{what}: expected {n} fields, got {len(toks)}")
    out = []
    for t in toks:
        try:
            out.append(int(t))
        except ValueError:
            raise ParseError(line, f"{what}: bad integer {t!r}") from None
    return out


def _floats(line: int, toks: list[str], n: int, what: str) -> np.ndarray:
    if len(toks) != n:
        raise ParseError(line, f"{what}: expected {n} numbers, got {len(toks)}")
    out = np.empty(n)
    for i, t in enumerate(toks):
        try:
            out[i] = float(t)
        except ValueError:
            raise ParseError(line, f"{what}: bad number {t!r}") from None
    return out


def read_problem(path) -> Problem:
    """Parse an RSBAL v1 file; all stored floats are recovered bit-exactly."""
    with open(path, "r", encoding="utf-8") as f:
        rec = _Records(f.read())

    line, toks = rec.next("header")
    if " ".join(toks) != HEADER:
        raise ParseError(line, f"bad header, expected {HEADER!r}")
    line, toks = rec.next("counts")
    n_cams, n_pts, n_obs = _ints(line, toks, 3, "counts")
    if n_cams < 0 or n_pts < 0 or n_obs < 0:
        raise CountMismatch(line, "negative count")

    cam_ids = np.empty(n_obs, dtype=np.int64)
    pt_ids = np.empty(n_obs, dtype=np.int64)
    m = np.empty((n_obs, 2))
    for k in range(n_obs):
        try:
            line, toks = rec.next(f"observation {k + 1} of {n_obs}")
        except ParseError as exc:
            raise CountMismatch(exc.line, f"missing observation {k + 1} of {n_obs}") from None
        if len(toks) != 4:
            raise ParseError(line, f"observation: expected 4 fields, got {len(toks)}")
        cam_ids[k], pt_ids[k] = _ints(line, toks[:2], 2, "observation ids")
        m[k] = _floats(line, toks[2:], 2, "observation pixels")
        if not (0 <= cam_ids[k] < n_cams) or not (0 <= pt_ids[k] < n_pts):
            raise IdOutOfRange(
                line, f"observation ids ({cam_ids[k]}, {pt_ids[k]}) outside "
                      f"counts ({n_cams}, {n_pts})")

    cameras = []
    for k in range(n_cams):
        try:
            line, toks = rec.next(f"camera {k + 1} of {n_cams}")
        except ParseError as exc:
            raise CountMismatch(exc.line, f"missing camera {k + 1} of {n_cams}") from None
        vals = _floats(line, toks, 14, "camera record")
        line2, toks2 = rec.next(f"principal point of camera {k + 1}")
        pp = _floats(line2, toks2, 2, "principal point")
        line3, toks3 = rec.next(f"rotation of camera {k + 1}")
        R0 = _floats(line3, toks3, 9, "rotation").reshape(3, 3)
        if not is_rotation(R0, tol=1e-9):
            raise ParseError(line3, "stored rotation is not orthonormal")
        if np.abs(so3_exp(vals[:3]) - R0).max() > 1e-9:
            raise ParseError(line3, "rotation disagrees with its axis-angle record")
        if vals[12] <= 0.0 or vals[13] <= 0.0:
            raise ParseError(line, "focal lengths must be positive")
        cameras.append(
            RsCamera(R0=R0, t0=vals[3:6], omega=vals[6:9], d=vals[9:12],
                     fx=vals[12], fy=vals[13], cx=pp[0], cy=pp[1])
        )

    points = np.empty((n_pts, 3))
    for k in range(n_pts):
        try:
            line, toks = rec.next(f"point {k + 1} of {n_pts}")
        except ParseError as exc:
            raise CountMismatch(exc.line, f"missing point {k + 1} of {n_pts}") from None
        points[k] = _floats(line, toks, 3, "point")

    prior = NoisePrior.isotropic(1.0)
    try:
        line, toks = rec.next("noise prior")
    except ParseError:
        toks = None
    if toks is not None:
        s = _floats(line, toks, 3, "noise prior")
        try:
            prior = NoisePrior(np.array([[s[0], s[1]], [s[1], s[2]]]))
        except ValueError as exc:
            raise ParseError(line, f"noise prior: {exc}") from None

    extra = rec.exhausted()
    if extra is not None:
        raise CountMismatch(extra, "more records than the declared counts")

    if n_obs:
        fx = np.array([cameras[j].fx for j in cam_ids])
        fy = np.array([cameras[j].fy for j in cam_ids])
        cx = np.array([cameras[j].cx for j in cam_ids])
        cy = np.array([cameras[j].cy for j in cam_ids])
        q = np.stack([(m[:, 0] - cx) / fx, (m[:, 1] - cy) / fy], axis=1)
    else:
        q = np.zeros((0, 2))
    observations = ObservationSet(cam_ids, pt_ids, q, m)
    return Problem(cameras=cameras, points=points, observations=observations, prior=prior)
