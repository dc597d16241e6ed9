"""Exception and warning types shared across the package."""


class BirdGPError(Exception):
    pass


class InvalidInput(BirdGPError, ValueError):
    pass


class InvalidConfig(BirdGPError, ValueError):
    pass


class ShapeError(BirdGPError, ValueError):
    pass


class GridMismatch(ShapeError):
    pass


class InvalidState(BirdGPError, RuntimeError):
    pass


class DegenerateInput(BirdGPError, ValueError):
    pass


class DegenerateCorrelation(DegenerateInput):
    pass


class ResourceLimit(BirdGPError, MemoryError):
    pass


class InsufficientData(BirdGPError, ValueError):
    pass


class NumericalFailure(BirdGPError, ArithmeticError):
    """Non-finite value or non-convergence. ``index`` locates the culprit when known."""

    def __init__(self, message, index=None, **context):
        super().__init__(message)
        self.index = index
        self.context = context


class RankDeficient(NumericalFailure):
    pass


class FormatError(BirdGPError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class TruncatedRank(UserWarning):
    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class DegenerateNoise(UserWarning):
    pass


class DegenerateSplit(UserWarning):
    pass
