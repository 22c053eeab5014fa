"""Exception hierarchy shared by every metaseg module."""

from __future__ import annotations


class MetasegError(Exception):
    """Base class for all errors raised by metaseg."""


class ConfigError(MetasegError, ValueError):
    """Invalid configuration, detected before any work is done."""


class ShapeError(MetasegError, ValueError):
    """Tensor or image dimensions that violate an operation's contract."""


class LabelRangeError(MetasegError, ValueError):
    """A class id outside ``[0, K)``."""


class NumericError(MetasegError, ArithmeticError):
    """NaN or Inf produced or encountered."""


class RoutingError(MetasegError, KeyError):
    """A task id with no head in the parameter set."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class IngestError(MetasegError, OSError):
    """A dataset directory that cannot be read into a TaskSource."""


class EmptyEvaluationError(MetasegError, ValueError):
    """mIoU requested over an accumulator in which every class union is zero."""


class ContractError(MetasegError, ValueError):
    """A call that violates an operation's documented preconditions."""
