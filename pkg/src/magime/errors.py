"""Exception hierarchy shared across the package."""


class MagiError(Exception):
    """Base class for all errors raised by magime."""


class InvalidArgumentError(MagiError, ValueError):
    pass


class UnsupportedSmoothnessError(InvalidArgumentError):
    pass


class ConditioningError(MagiError, ArithmeticError):
    """A covariance factorization failed even after jitter escalation."""

    def __init__(self, message, subject=None, component=None):
        super().__init__(message)
        self.subject = subject
        self.component = component


class InsufficientDataError(MagiError, ValueError):
    pass


class NonConvergenceError(MagiError):
    """An optimizer gave up; ``incumbent`` holds the best point found."""

    def __init__(self, message, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent


class ModelLookupError(MagiError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ModelEvaluationError(MagiError, ArithmeticError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class GridConstructionError(MagiError, ValueError):
    pass


class PosteriorEvaluationError(MagiError, ArithmeticError):
    def __init__(self, message, term=None, subject=None):
        super().__init__(message)
        self.term = term
        self.subject = subject


class InnerFailureError(NonConvergenceError):
    pass


class InitializationError(MagiError):
    pass


class BlowUpError(MagiError, ArithmeticError):
    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time


class DataParseError(MagiError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
