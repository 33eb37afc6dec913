"""Exception hierarchy shared by all modules."""


class DegenKernelError(Exception):
    """Base class for library errors."""


class InvalidInputError(DegenKernelError, ValueError):
    """Arguments are outside the documented domain."""


class ConditionViolatedError(DegenKernelError, ValueError):
    """An exponent condition required by a bound does not hold."""


class TruncationError(DegenKernelError, RuntimeError):
    """The truncated ball is too small for the requested time horizon."""

    def __init__(self, message: str, required_radius: int | None = None):
        super().__init__(message)
        self.required_radius = required_radius


class ResourceLimitError(DegenKernelError, RuntimeError):
    """A configured size or work cap would be exceeded."""


class StripTooSmallError(DegenKernelError, RuntimeError):
    """The optimal chemical path touches the edge of the computational strip."""
