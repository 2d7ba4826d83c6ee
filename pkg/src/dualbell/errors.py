"""Exception hierarchy shared by all dualbell modules.

Every error raised on purpose by the library derives from :class:`DualBellError`
so callers (notably the CLI) can map them onto exit codes.
"""


class DualBellError(Exception):
    """Base class for library errors."""


class ConfigError(DualBellError, ValueError):
    """Invalid or inconsistent configuration values.

    ``keys`` lists the offending configuration keys when they are known.
    """

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


class ResolutionError(DualBellError):
    """A physical length scale is not resolved by the grid."""


class NumericalBlowupError(DualBellError, FloatingPointError):
    """NaN or Inf appeared in the propagated field."""

    def __init__(self, message, max_phase=None):
        super().__init__(message)
        self.max_phase = max_phase


class SequencingError(DualBellError):
    """A pulse or stage request is inconsistent with the lattice or schedule."""


class CalibrationError(DualBellError):
    """A calibrated operation missed its target."""

    def __init__(self, message, measured=None):
        super().__init__(message)
        self.measured = measured


class FormatError(DualBellError):
    """Malformed or truncated snapshot file."""


class AnalysisError(DualBellError):
    """An observable could not be extracted (e.g. empty integration region)."""


class GeometryError(AnalysisError):
    """Mode regions overlap or do not fit on the momentum grid."""


class StageError(DualBellError):
    """A sequence stage failed; carries the stage name and the last snapshot."""

    def __init__(self, message, stage, last_snapshot=None):
        super().__init__(message)
        self.stage = stage
        self.last_snapshot = last_snapshot
