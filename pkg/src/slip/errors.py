"""Exception hierarchy shared by every slip module."""


class SlipError(Exception):
    """Base class for all errors raised by slip."""


class DimensionMismatch(SlipError, ValueError):
    pass


class ShapeError(SlipError, ValueError):
    pass


class ConvergenceError(SlipError, RuntimeError):
    pass


class RankError(SlipError, ValueError):
    pass


class UnsafeSplitError(SlipError, ValueError):
    """A split with fewer than two hidden components was requested."""


class PlanShapeMismatch(SlipError, ValueError):
    pass


class UnknownLayerError(SlipError, KeyError):
    pass


class DomainError(SlipError, ValueError):
    pass


class MaskExhaustedError(SlipError, RuntimeError):
    """No unused one-time pad is left for the requested (inference, layer, path)."""


class TopologyMismatch(SlipError, ValueError):
    pass


class ProtocolError(SlipError, RuntimeError):
    pass


class MalformedFrame(SlipError, ValueError):
    pass


class VersionMismatch(SlipError, RuntimeError):
    pass


class ConnectionClosed(SlipError, ConnectionError):
    pass


class Timeout(SlipError, TimeoutError):
    pass


class SessionAborted(SlipError, RuntimeError):
    pass


class RankDeficientError(SlipError, ValueError):
    pass


class DegenerateError(SlipError, ValueError):
    """The orthogonal complement does not pin down a unique direction."""

    def __init__(self, message, nullity=None, free_dims=None):
        super().__init__(message)
        self.nullity = nullity
        self.free_dims = free_dims


class InsufficientSamples(SlipError, ValueError):
    pass


class DensityWarning(UserWarning):
    """Charlie's factored storage exceeds the dense parameter count."""
