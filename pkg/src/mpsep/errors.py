"""Exception types shared across the package."""


class MpsepError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(MpsepError, ValueError):
    """Two grids that must agree in shape (or scale) do not."""


class ConfigError(MpsepError, ValueError):
    """A configuration value violates its invariants."""


class AudioLengthError(MpsepError, ValueError):
    """A waveform is too short for the requested analysis."""


class UndefinedMetricError(MpsepError, ValueError):
    """A metric is requested on degenerate inputs (e.g. all-zero reference)."""


class TrainingDivergedError(MpsepError, RuntimeError):
    """Training hit a non-finite loss; carries the last good parameter state."""

    def __init__(self, message, last_good_state=None, history=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.history = history
