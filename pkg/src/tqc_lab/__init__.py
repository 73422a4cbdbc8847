"""Truncated quantile critics: numeric core, agents, toy bias lab and training CLI."""

from tqc_lab.errors import (
    EnvStateError,
    InputShapeError,
    InvalidArgumentError,
    LayoutMismatchError,
    NumericError,
    TQCLabError,
    TraceConsumedError,
)

__version__ = "0.1.0"

__all__ = [
    "EnvStateError",
    "InputShapeError",
    "InvalidArgumentError",
    "LayoutMismatchError",
    "NumericError",
    "TQCLabError",
    "TraceConsumedError",
    "__version__",
]
