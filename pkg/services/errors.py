# services/errors.py

class MaskDiffError(Exception):
    """Base class for every error raised by the maskdiff services."""


class InvalidDistribution(MaskDiffError, ValueError):
    pass


class MaskQueryError(MaskDiffError, ValueError):
    pass


class InvalidSteps(MaskDiffError, ValueError):
    pass


class DomainError(MaskDiffError, ValueError):
    pass


class DataContainsMask(MaskDiffError, ValueError):
    pass


class TimeOrderError(MaskDiffError, ValueError):
    pass


class UnreachableLatent(MaskDiffError, ValueError):
    pass


class ShapeError(MaskDiffError, ValueError):
    pass


class NumericalError(MaskDiffError, ArithmeticError):
    pass


class CacheRequiresTimeFree(MaskDiffError):
    pass


class BlockSizeError(MaskDiffError, ValueError):
    pass


class TooLarge(MaskDiffError, ValueError):
    pass


class EmptyInput(MaskDiffError, ValueError):
    pass


class ConfigError(MaskDiffError, ValueError):
    pass


class BoundViolation(MaskDiffError):
    """The exhaustive NELBO fell below the exact NLL."""


class CheckFailed(MaskDiffError):
    """An asserting command found a violated property."""

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}
