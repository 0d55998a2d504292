"""Exception hierarchy shared by every module."""


class L2LesionError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class ShapeMismatch(L2LesionError, ValueError):
    pass


class NonFiniteInput(L2LesionError, ValueError):
    exit_code = 3


class NotScalarLoss(L2LesionError, ValueError):
    pass


class DetachedLoss(L2LesionError, ValueError):
    pass


class NonFiniteFunctionValue(L2LesionError, ArithmeticError):
    exit_code = 3


class WindowLargerThanInput(L2LesionError, ValueError):
    pass


class LabelOutOfRange(L2LesionError, ValueError):
    pass


class EmptyBox(L2LesionError, ValueError):
    pass


class ImageTooSmall(L2LesionError, ValueError):
    pass


class UnscoredProposal(L2LesionError, ValueError):
    pass


class BadMagic(L2LesionError, ValueError):
    pass


class TruncatedFile(L2LesionError, ValueError):
    pass


class InconsistentDims(L2LesionError, ValueError):
    pass


class MissingModality(L2LesionError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DegenerateKappa(L2LesionError, ArithmeticError):
    pass


class DomainMismatch(L2LesionError, ValueError):
    pass


class UnscoredDetection(L2LesionError, ValueError):
    pass


class IoFailure(L2LesionError, OSError):
    pass


class BadConfig(L2LesionError, ValueError):
    exit_code = 1


class DatasetMissing(L2LesionError, FileNotFoundError):
    pass


class DivergedLoss(L2LesionError, ArithmeticError):
    exit_code = 3


class CheckpointMismatch(L2LesionError, ValueError):
    pass


class BadSubset(L2LesionError, ValueError):
    exit_code = 1
