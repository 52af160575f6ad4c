"""Exception types raised across the package."""


class DixonError(Exception):
    """Base class for all package errors."""


class FormatError(DixonError, ValueError):
    """Malformed binary header or unknown file layout."""


class PayloadLengthError(FormatError):
    """Binary payload is shorter or longer than its header promises."""


class BoundsError(DixonError, IndexError):
    pass


class ShapeError(DixonError, ValueError):
    pass


class SizeError(DixonError, ValueError):
    pass


class DegenerateError(DixonError, ValueError):
    """Input carries no usable signal (all-zero study, empty phantom)."""


class DirectiveError(DixonError, ValueError):
    """A swap directive produced an empty mask or has bad geometry."""


class ConfigError(DixonError, ValueError):
    pass


class StateError(DixonError, RuntimeError):
    pass


class DivergenceError(DixonError, RuntimeError):
    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step
