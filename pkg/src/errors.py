"""Exception hierarchy shared by every kalgrad module."""


class KalgradError(Exception):
    """Base class. `exit_code` is what the CLI returns when this escapes."""
    exit_code = 3


class DimensionError(KalgradError, ValueError):
    pass


class DomainError(KalgradError, ValueError):
    pass


class InstabilityError(KalgradError, ArithmeticError):
    """A gain or matrix that must be Schur stable is not."""
    pass


class NumericalError(KalgradError, ArithmeticError):
    pass


class ConvergenceError(KalgradError, RuntimeError):
    """An iteration gave up. Carries the partial run record when there is one."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class StallError(ConvergenceError):
    """Too many consecutive safeguard rejections."""
    pass


class InitializationError(KalgradError):
    pass


class InconclusiveError(KalgradError):
    """A Monte-Carlo diagnostic ran out of budget. Carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DiagnosticFailure(KalgradError, AssertionError):
    pass


class ConfigError(KalgradError):
    exit_code = 2

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(prefix + message)
