"""Exception types shared across the package."""


class RobustPeError(Exception):
    """Base class for every error raised by robustpe."""


class MalformedPe(RobustPeError, ValueError):
    def __init__(self, reason: str, offset: int = -1):
        super().__init__(f"{reason} (offset {offset:#x})" if offset >= 0 else reason)
        self.reason = reason
        self.offset = offset


class LayoutConflict(RobustPeError, ValueError):
    pass


class IndexOutOfRange(RobustPeError, IndexError):
    pass


class EmptyDonorPool(RobustPeError, ValueError):
    pass


class HeaderOverflow(RobustPeError, ValueError):
    pass


class EmptyCorpus(RobustPeError, ValueError):
    pass


class EmptySections(RobustPeError, ValueError):
    pass


class DimensionMismatch(RobustPeError, ValueError):
    pass


class Diverged(RobustPeError, ArithmeticError):
    pass


class DegenerateData(RobustPeError, ValueError):
    pass


class WidthMismatch(RobustPeError, ValueError):
    pass


class OneClassOnly(RobustPeError, ValueError):
    pass


class SpecConflict(RobustPeError, ValueError):
    pass


class VocabularyMismatch(RobustPeError, ValueError):
    """Raised when model parameters were trained against a different vocabulary."""


class InvalidRecipe(RobustPeError, ValueError):
    """Raised when a mutation recipe violates an attack's precondition."""
