"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes do not fit the operation."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class NonFiniteError(FloatingPointError):
    """A gradient or loss went NaN/Inf."""


class PopulationError(ValueError):
    """Too few samples for the requested neighbourhood or resampling."""


class FormatError(ValueError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class ConfigError(ValueError):
    """Invalid experiment or strategy configuration."""


class TrainingError(RuntimeError):
    """Training could not complete (divergence, exhausted retries)."""
