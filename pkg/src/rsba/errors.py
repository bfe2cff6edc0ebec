"""Exception types shared across the package."""


class RsbaError(Exception):
    """Base class for every error raised by this package."""


class AngleNearPi(RsbaError):
    """Rotation angle within tolerance of pi, where the log map is singular."""


class DepthZero(RsbaError):
    """Perspective division attempted with |Z| below threshold."""


class CheiralityViolation(RsbaError):
    """Point does not lie in front of the camera at the evaluated row."""


class NoConvergence(RsbaError):
    """Fixed-point row iteration exhausted its budget (camera too fast)."""


class MissingPixelMeasurement(RsbaError):
    """Operation needs the pixel-domain measurement but none is stored."""


class DegenerateCovariance(RsbaError):
    """Residual covariance is singular: the row-weight matrix has a zero
    lower-right entry, the marker of planar degeneracy."""


class NotPositiveDefinite(RsbaError):
    """A damped normal-equation block failed its Cholesky factorization."""


class InitializationInfeasible(RsbaError):
    """Initial parameters give a non-finite cost."""


class GenerationFailure(RsbaError):
    """Scene generator could not satisfy visibility constraints."""


class DimensionMismatch(RsbaError):
    """Metric inputs have inconsistent sizes."""


class ZeroTranslation(RsbaError):
    """Translation direction metric is undefined for a zero vector."""


class DegenerateConfiguration(RsbaError):
    """Trajectory alignment needs at least three non-collinear points."""


class ParseError(RsbaError):
    """Malformed problem file.  Carries the 1-based offending line number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class IdOutOfRange(ParseError):
    """Observation references a camera or point id outside the declared counts."""


class CountMismatch(ParseError):
    """Declared record counts disagree with the records actually present."""
