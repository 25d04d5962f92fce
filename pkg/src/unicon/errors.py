"""Exception hierarchy shared across the package."""


class UniconError(Exception):
    """Base class for all package errors."""


class MissingFile(UniconError, FileNotFoundError):
    pass


class ShapeMismatch(UniconError, ValueError):
    pass


class BadAgeIndex(UniconError, ValueError):
    pass


class IndexOutOfRange(UniconError, IndexError):
    pass


class DecodeError(UniconError):
    pass


class NoAnnotatedSlices(UniconError):
    pass


class CropTooLarge(UniconError, ValueError):
    pass


class UnknownAge(UniconError, ValueError):
    pass


class CoordOutOfRange(UniconError, ValueError):
    pass


class ShapeError(UniconError, ValueError):
    pass


class BadSpec(UniconError, ValueError):
    pass


class AlreadyConditioned(UniconError):
    pass


class EmptyAgeGroup(UniconError, ValueError):
    pass


class NaNLoss(UniconError, FloatingPointError):
    """Raised when a training step produces a non-finite loss."""


class UsageError(UniconError):
    pass
