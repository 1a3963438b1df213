"""Exception hierarchy shared by every module in the package."""


class CbvError(Exception):
    """Base class for all package errors."""


class ZeroVector(CbvError, ValueError):
    pass


class UnknownNode(CbvError, KeyError):
    pass


class NotScalar(CbvError, ValueError):
    pass


class EmptyProgram(CbvError, ValueError):
    pass


class ShapeMismatch(CbvError, ValueError):
    pass


class LengthMismatch(CbvError, ValueError):
    pass


class UnknownLabel(CbvError, KeyError):
    pass


class UnknownClass(CbvError, KeyError):
    pass


class SingleClassDataset(CbvError, ValueError):
    pass


class NonConvergence(CbvError, RuntimeError):
    pass


class EmptyPairs(CbvError, ValueError):
    pass


class DivergedLoss(CbvError, RuntimeError):
    pass


class BadThreshold(CbvError, ValueError):
    pass


class BadRange(CbvError, ValueError):
    pass


class BadStep(CbvError, ValueError):
    pass


class NonFiniteState(CbvError, RuntimeError):
    pass


class CheckpointError(CbvError, ValueError):
    pass


class ParseError(CbvError, ValueError):
    pass


class MissingFile(CbvError, FileNotFoundError):
    pass


class BadLabel(CbvError, ValueError):
    pass


class EmptyManifest(CbvError, ValueError):
    pass


class DuplicateRecord(CbvError, ValueError):
    pass


class EmptyClass(CbvError, ValueError):
    pass


class EmptyInput(CbvError, ValueError):
    pass


class EmptyDataset(CbvError, ValueError):
    pass
