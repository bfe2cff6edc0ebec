"""Rolling-shutter bundle adjustment with covariance-standardized residuals.

Jointly refines camera poses, per-camera intra-frame velocities and 3D
points by minimizing reprojection error whitened by its propagated noise
covariance, with point- and pose-eliminating Schur back-ends for speed, a
deterministic synthetic-scene harness and gauge-aligned error metrics.
"""

from .errors import RsbaError
from .geometry import RsCamera, so3_exp, so3_log
from .problem import NoisePrior, Observation, ObservationSet, Problem
from .solver import SolveReport, SolverConfig, optimize
from .synthetic import PerturbMagnitudes, SceneConfig, generate_scene

__all__ = [
    "RsbaError",
    "RsCamera",
    "so3_exp",
    "so3_log",
    "NoisePrior",
    "Observation",
    "ObservationSet",
    "Problem",
    "SolveReport",
    "SolverConfig",
    "optimize",
    "PerturbMagnitudes",
    "SceneConfig",
    "generate_scene",
]

__version__ = "0.1.0"
