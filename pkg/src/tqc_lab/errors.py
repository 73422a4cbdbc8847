"""Exception types shared across the package."""


class TQCLabError(Exception):
    """Base class for all errors raised by tqc_lab."""


class InvalidArgumentError(TQCLabError, ValueError):
    pass


class InputShapeError(InvalidArgumentError):
    pass


class LayoutMismatchError(InvalidArgumentError):
    pass


class TraceConsumedError(TQCLabError, RuntimeError):
    pass


class EnvStateError(TQCLabError, RuntimeError):
    """Raised when an environment is stepped after its episode ended."""


class NumericError(TQCLabError, ArithmeticError):
    """A non-finite value showed up where finite numbers are required.

    ``index`` points at the first offending flat component when known.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index
