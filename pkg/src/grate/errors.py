"""Exception hierarchy shared by every grate module."""


class GrateError(Exception):
    """Base class for all grate errors."""


class DimensionError(GrateError, ValueError):
    """Shapes or sizes of the inputs do not agree."""


class DomainError(GrateError, ValueError):
    """An input lies outside the set of values an operation accepts."""


class CapabilityError(GrateError):
    """The request exceeds a configured limit of the implementation."""


class SingularityError(GrateError, ArithmeticError):
    """A least-squares system is rank deficient and no fallback was allowed."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ConvergenceError(GrateError):
    """An iterative solver hit its iteration cap.

    ``best`` holds the last iterate, ``context`` free-form details such as the
    ALS iteration and block in which the failure happened.
    """

    def __init__(self, message, best=None, context=None):
        super().__init__(message)
        self.best = best
        self.context = context or {}


class StagnationError(GrateError):
    """An ALS run is stuck at the zero model with a nonzero target."""


class ParseError(GrateError, ValueError):
    """Malformed input file; ``position`` is a line number or token index."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)
        self.position = position
