"""Exception hierarchy shared by every module."""


class RieszLabError(Exception):
    """Base class for all package errors."""


class ParameterError(RieszLabError, ValueError):
    """Raised for out-of-range or inconsistent parameters."""


class ResolutionError(RieszLabError):
    """The smooth remainder of the potential is not resolved on the grid."""


class SingularityError(RieszLabError, ZeroDivisionError):
    """A singular kernel was evaluated at (or wrapped onto) the origin."""


class DomainError(RieszLabError, ValueError):
    """A functional was evaluated outside its domain (e.g. log of a nonpositive density)."""


class BlowUpError(RieszLabError, FloatingPointError):
    """Non-finite values or a positivity breach during time stepping.

    Attributes
    ----------
    t : float
        Simulation time of the last finite state.
    """

    def __init__(self, message, t):
        super().__init__(f"{message} (t={t:.6g})")
        self.t = t


class FitError(RieszLabError, ValueError):
    """Raised when a log-linear fit receives unusable data."""


class StudyError(RieszLabError):
    """A multi-run study could not produce a valid result (e.g. too many blow-ups)."""
