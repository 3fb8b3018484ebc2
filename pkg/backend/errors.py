# backend/errors.py
"""Exception hierarchy shared by every module, plus the CLI exit-code mapping."""


class LabError(Exception):
    """Base class for all errors raised by the backend."""


# ── Domain / precondition errors ──────────────────────────────────────────

class DomainError(LabError, ValueError):
    """Input outside the operation's domain (inadmissible config, bad radius, ...)."""


class ConfigError(LabError, ValueError):
    """Invalid run configuration; `path` is the dotted key path at fault."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ChartRadiusError(DomainError):
    pass


class ZeroMeanError(DomainError):
    pass


class SingularityError(DomainError):
    pass


class SingularPotentialError(DomainError):
    pass


class InadmissibleError(DomainError):
    """ε²C(u) > 1: the state lies outside the admissible set."""


class ConditionViolatedError(DomainError):
    pass


class InsufficientDataError(DomainError):
    pass


class UnsupportedSurfaceError(LabError, NotImplementedError):
    pass


# ── Numerical errors ──────────────────────────────────────────────────────

class NumericalError(LabError, RuntimeError):
    pass


class InconsistencyError(NumericalError):
    """Two independent evaluations of the same quantity disagree."""


class DiscretizationError(NumericalError):
    pass


class BracketError(NumericalError):
    pass


class StaleSeedError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message, iterations=None, last_ratio=None):
        self.iterations = iterations
        self.last_ratio = last_ratio
        super().__init__(message)


class ContinuationNeededError(NonConvergenceError):
    """Newton Jacobian is near-singular; a smaller λ step is required."""


class BranchEndError(NonConvergenceError):
    """Continuation step underflow. `results` holds the accepted solutions so far."""

    def __init__(self, message, results=None):
        self.results = list(results or [])
        super().__init__(message)


# ── Exit codes ────────────────────────────────────────────────────────────

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3


def exit_code_for(exc):
    """Map an exception raised by a pipeline to the CLI exit code."""
    if exc is None:
        return EXIT_OK
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NonConvergenceError):
        return EXIT_NONCONVERGENCE
    return EXIT_FAILED
