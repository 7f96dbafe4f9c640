"""Exception types raised across the toolkit."""


class LowrankError(Exception):
    """Base class for all toolkit errors."""


class FormatError(LowrankError):
    """A container or manifest file is malformed (bad header, length mismatch, bad version)."""


class ManifestMismatch(LowrankError):
    """A manifest references tensors that do not exist, or two models disagree structurally."""


class ShapeError(LowrankError):
    """Tensor shapes contradict each other or the declared model structure."""


class IoError(LowrankError):
    """Reading or writing a file failed."""


class RankError(LowrankError):
    """A requested truncation rank is out of the valid range."""


class NumericalError(LowrankError):
    """A numerical routine failed (non-convergence, non-finite values, factorization failure)."""


class DegenerateImportance(LowrankError):
    """Importance scores cannot be normalized because their mean is (near) zero."""


class BudgetError(LowrankError):
    """The requested retention budget cannot be met by any feasible rank assignment."""
