"""Exception types shared across the toolkit."""


class EvrotError(Exception):
    """Base class for all evrot-specific failures."""


class CalibrationError(EvrotError):
    """Invalid camera calibration parameters or file."""


class LogBranchError(EvrotError):
    """Rotation angle is at (or numerically indistinguishable from) pi.

    The principal log branch is undefined there; callers holding a control
    grid should re-grid with finer spacing.
    """


class DegenerateWarpError(EvrotError):
    """Warp evaluated at a singular configuration (rotated point at a pole)."""


class SplineRangeError(EvrotError):
    """Query time outside the spline's valid range (extrapolation refused)."""


class SplineFitError(EvrotError):
    """Spline fit is rank-deficient or the samples do not cover the grid."""


class StreamFormatError(EvrotError):
    """Malformed event/gyro/trajectory file; message carries the line number."""


class OptimizationError(EvrotError):
    """Non-finite objective or gradient during iterative optimization.

    Carries the last good report so callers can fall back gracefully.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
