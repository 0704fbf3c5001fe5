"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent; message names the offending axes."""


class NumericError(RuntimeError):
    """A kernel received or produced non-finite values."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


class DivergenceError(RuntimeError):
    """Iterative solver produced a non-finite iterate."""


class ConfigError(ValueError):
    """Invalid configuration; message lists every violated constraint."""


class DataFormatError(ValueError):
    """Dataset directory or checkpoint file failed validation."""
