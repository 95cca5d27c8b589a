"""Exception types raised by the measure-mdp core."""
from typing import Any, List, Optional


class MeasureMdpError(Exception):
    """Base class for every error raised by the toolkit."""

    kind = "error"


class InputError(MeasureMdpError, ValueError):
    """Malformed input: bad shapes, invalid indices, measures off the simplex."""

    kind = "input"


class DomainError(MeasureMdpError, ValueError):
    """Evaluation outside the mathematical domain (e.g. KL support mismatch)."""

    kind = "domain"


class NumericalError(MeasureMdpError, ArithmeticError):
    """An iterative method stopped at its cap without meeting its tolerance."""

    kind = "numerical"

    def __init__(self, message: str, residual: Optional[float] = None):
        super().__init__(message)
        self.residual = residual


class SizeError(MeasureMdpError):
    """Policy enumeration would exceed the configured cap."""

    kind = "size"

    def __init__(self, count: int, cap: int):
        super().__init__(
            f"{count} deterministic policies exceed the enumeration cap of {cap}; "
            "use the linear solver or raise MEASURE_MDP_POLICY_CAP."
        )
        self.count = count
        self.cap = cap


class LearningFailure(MeasureMdpError):
    """Fitted Q-iteration diverged."""

    kind = "learning"

    def __init__(self, message: str, history: Optional[List[Any]] = None):
        super().__init__(message)
        self.history = history or []


class ParseError(MeasureMdpError):
    """An input file could not be read or decoded."""

    kind = "parse"

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        super().__init__(message)
        self.line = line
        self.column = column


class UsageError(InputError):
    """A command-line option that cannot work with this problem."""

    kind = "usage"
