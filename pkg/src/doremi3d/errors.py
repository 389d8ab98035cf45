"""Exception types shared across the package."""


class DoremiError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DoremiError, ValueError):
    """Shapes, dimensions or config values that do not fit together."""


class UsageError(DoremiError, ValueError):
    """An API called outside its contract (e.g. backward on a non-scalar)."""


class NonFiniteError(DoremiError, FloatingPointError):
    """A forward computation produced NaN or Inf."""


class GenerationError(DoremiError):
    """Synthetic scene generation could not satisfy its constraints."""


class AugmentationError(DoremiError):
    """An augmentation would have removed every point."""


class FormatError(DoremiError):
    """A checkpoint, cloud or trace file is malformed or incomplete."""


class DomainLookupError(DoremiError, KeyError):
    """Unknown domain id outside averaged-unseen mode."""
