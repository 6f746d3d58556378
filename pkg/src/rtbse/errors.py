"""Exception types raised across the package."""


class RtbseError(Exception):
    """Base class for all package errors."""


class SingularMatrix(RtbseError, ArithmeticError):
    pass


class ConvergenceFailure(RtbseError, ArithmeticError):
    pass


class NonFiniteIntermediate(RtbseError, ArithmeticError):
    pass


class RankDeficiencyViolation(RtbseError, ValueError):
    pass


class ShapeMismatch(RtbseError, ValueError):
    pass


class InputTooShort(RtbseError, ValueError):
    pass


class ChannelMismatch(RtbseError, ValueError):
    pass


class SilentSpeech(RtbseError, ValueError):
    pass


class ZeroReference(RtbseError, ValueError):
    pass


class NotStarted(RtbseError, RuntimeError):
    """Raised when statistics are requested before anything was processed."""


class StrictDeadlineViolation(RtbseError, RuntimeError):
    pass
