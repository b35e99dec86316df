"""Exception types raised across the package."""


class MVGameError(Exception):
    """Base class for all package errors."""


class ProblemFormatError(MVGameError):
    """The problem document is structurally malformed."""


class DomainError(MVGameError, ValueError):
    """An argument lies outside its admissible domain."""


class SingularityError(MVGameError):
    """An ODE solution left the configured bound or became non-finite."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class UnsupportedModeError(MVGameError):
    """The requested synthesis mode is not available for this instance."""


class SimulationDivergedError(MVGameError):
    """A simulated state became non-finite."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class UnidentifiableJumpError(MVGameError):
    """An observed jump size matches no mark of the mark space."""


class DegenerateFilterError(MVGameError):
    """All particle weights collapsed to zero."""


class FixedPointSingularError(MVGameError):
    """The linear system of a fixed point is singular."""

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class ContractError(MVGameError):
    """A caller supplied inputs that violate an operation's precondition."""


class ConfigError(MVGameError, ValueError):
    """Inconsistent run settings."""
