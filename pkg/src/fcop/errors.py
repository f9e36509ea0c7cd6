"""Exception hierarchy shared by all fcop modules."""


class FcopError(Exception):
    """Base class for every error raised by fcop."""


class DegenerateError(FcopError, ValueError):
    """A triplet cannot determine (focal, scale) uniquely."""


class EmptyInput(FcopError, ValueError):
    pass


class InsufficientCorrespondences(FcopError, ValueError):
    pass


class NoValidTriplet(FcopError, RuntimeError):
    pass


class NoEligibleObject(FcopError, ValueError):
    pass


class DegenerateConfiguration(FcopError, ValueError):
    """Point set is collinear or coincident; no unique similarity exists."""


class LengthMismatch(FcopError, ValueError):
    pass


class NoConsensus(FcopError, RuntimeError):
    pass


class InvalidConfig(FcopError, ValueError):
    pass


class DimensionMismatch(FcopError, ValueError):
    pass


class UnreadableFile(FcopError, OSError):
    pass


class EmptyObject(FcopError, ValueError):
    """An instance mask yields fewer than three usable correspondences."""
