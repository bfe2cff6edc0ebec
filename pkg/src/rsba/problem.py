"""Problem container: cameras, points, observations and the noise prior.

A landmark is a plain 3-vector in scene units.  Observations are stored in
struct-of-arrays form (:class:`ObservationSet`) so that large problems stay
cheap to build and to scan; indexing the set yields :class:`Observation`
views for per-observation work.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .geometry import RsCamera, hat


@dataclass
class Observation:
    """A single measurement: (camera id, point id, normalized q, pixel m).

    ``q = [c, r]`` is the normalized measurement; ``m = [u, v]`` is the raw
    pixel measurement and may be absent for hand-built observations (the
    pixel-domain residual then refuses to evaluate).
    """

    cam_id: int
    point_id: int
    q: np.ndarray
    m: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(2)
        if self.m is not None:
            self.m = np.asarray(self.m, dtype=float).reshape(2)


class ObservationSet(Sequence):
    """Immutable struct-of-arrays collection of observations."""

    def __init__(
        self,
        cam_ids: np.ndarray,
        point_ids: np.ndarray,
        q: np.ndarray,
        m: np.ndarray | None = None,
    ):
        self.cam_ids = np.asarray(cam_ids, dtype=np.int64).reshape(-1)
        self.point_ids = np.asarray(point_ids, dtype=np.int64).reshape(-1)
        n = len(self.cam_ids)
        self.q = np.asarray(q, dtype=float).reshape(n, 2)
        self.m = None if m is None else np.asarray(m, dtype=float).reshape(n, 2)
        if len(self.point_ids) != n:
            raise ValueError("cam_ids and point_ids must have equal length")

    @classmethod
    def from_list(cls, observations: Sequence[Observation]) -> "ObservationSet":
        if not observations:
            return cls(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)))
        has_m = all(o.m is not None for o in observations)
        return cls(
            np.array([o.cam_id for o in observations]),
            np.array([o.point_id for o in observations]),
            np.array([o.q for o in observations]),
            np.array([o.m for o in observations]) if has_m else None,
        )

    def __len__(self) -> int:
        return len(self.cam_ids)

    def __getitem__(self, i) -> Observation:
        if isinstance(i, slice):
            return ObservationSet(
                self.cam_ids[i], self.point_ids[i], self.q[i],
                None if self.m is None else self.m[i],
            )
        return Observation(
            cam_id=int(self.cam_ids[i]),
            point_id=int(self.point_ids[i]),
            q=self.q[i].copy(),
            m=None if self.m is None else self.m[i].copy(),
        )

    def __iter__(self) -> Iterator[Observation]:
        for i in range(len(self)):
            yield self[i]

    def copy(self) -> "ObservationSet":
        return ObservationSet(
            self.cam_ids.copy(), self.point_ids.copy(), self.q.copy(),
            None if self.m is None else self.m.copy(),
        )


@dataclass
class NoisePrior:
    """Prior pixel-noise covariance, a 2x2 SPD matrix in pixels^2."""

    Sigma: np.ndarray

    def __post_init__(self):
        self.Sigma = np.asarray(self.Sigma, dtype=float).reshape(2, 2)
        if np.abs(self.Sigma - self.Sigma.T).max() > 1e-14:
            raise ValueError("noise covariance must be symmetric")
        if np.linalg.eigvalsh(self.Sigma).min() <= 0.0:
            raise ValueError("noise covariance must be positive definite")

    @classmethod
    def isotropic(cls, sigma_px: float = 1.0) -> "NoisePrior":
        return cls(sigma_px**2 * np.eye(2))


@dataclass
class Problem:
    """Solver state: cameras, landmarks, observations, pixel-noise prior."""

    cameras: list[RsCamera]
    points: np.ndarray
    observations: ObservationSet
    prior: NoisePrior = field(default_factory=NoisePrior.isotropic)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if isinstance(self.observations, (list, tuple)):
            self.observations = ObservationSet.from_list(self.observations)

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    def copy(self) -> "Problem":
        return Problem(
            cameras=[c.copy() for c in self.cameras],
            points=self.points.copy(),
            observations=self.observations.copy(),
            prior=NoisePrior(self.prior.Sigma.copy()),
        )

    def validate_ids(self) -> None:
        obs = self.observations
        if len(obs) and (
            obs.cam_ids.min() < 0 or obs.cam_ids.max() >= self.n_cameras
            or obs.point_ids.min() < 0 or obs.point_ids.max() >= self.n_points
        ):
            raise ValueError("observation ids out of range")


def apply_gauge(problem: Problem, scale: float, R: np.ndarray, t: np.ndarray) -> Problem:
    """Apply a global similarity (scale, R, t) to the whole reconstruction.

    Points map as ``P' = scale * R @ P + t``; camera parameters transform so
    that every camera-frame point is exactly scaled by ``scale``, which
    leaves all normalized reprojection residuals unchanged.  The linear
    velocity picks up a coupling term because the rotating camera sees the
    displaced world origin move.
    """
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    cameras = []
    for cam in problem.cameras:
        Rt = cam.R0 @ R.T
        cameras.append(
            RsCamera(
                R0=Rt,
                t0=scale * cam.t0 - Rt @ t,
                omega=cam.omega.copy(),
                d=scale * cam.d - hat(cam.omega) @ (Rt @ t),
                fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
            )
        )
    return Problem(
        cameras=cameras,
        points=scale * problem.points @ R.T + t,
        observations=problem.observations.copy(),
        prior=NoisePrior(problem.prior.Sigma.copy()),
    )
