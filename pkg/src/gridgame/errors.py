"""Exception types shared across the package.

Every error raised by this package derives from GridGameError so callers
can catch domain failures without swallowing programming errors.
"""


class GridGameError(Exception):
    """Base class for all package errors."""


class ParseError(GridGameError):
    """A file could not be parsed (malformed JSON/CSV/TOML, bad field)."""


class ValidationError(GridGameError):
    """Parsed data violates a structural invariant (disconnected graph, ...)."""


class ConfigError(GridGameError):
    """An experiment or solver configuration is unusable."""


class DimensionError(GridGameError):
    """Vector/matrix shapes do not line up."""


class DegenerateError(GridGameError):
    """A construction is degenerate: rank-deficient measurement matrix or
    an all-zero line sensitivity."""


class SingularError(GridGameError):
    """The weighted normal matrix is numerically singular."""


class UnknownBranchError(GridGameError):
    """The requested line is not a branch of the case."""


class UnboundedError(GridGameError):
    """The stealth-attack problem is unbounded along a zero-residual ray.

    ``direction`` holds the certificate: a measurement-space vector with
    (numerically) zero residual and a positive objective component.
    """

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class NonconvergenceError(GridGameError):
    """An iterative solver ran out of iterations before meeting tolerance."""


class InfeasibleBaseline(GridGameError):
    """The unattacked operating point is already flagged by the detector."""


class DegenerateDataError(GridGameError):
    """A training set contains a single class."""


class EmptySetError(GridGameError):
    """A rate was requested over an empty sample set."""


class MissingThresholdError(GridGameError):
    """No attack budget is known for a required compromised-meter set."""


class DegenerateGameError(GridGameError):
    """The game LP produced a numerically meaningless strategy."""


class NumericalError(GridGameError):
    """A numerical routine hit a pivot/conditioning failure."""


class CalibrationMismatchError(GridGameError):
    """The two detectors' false-alarm rates are too far apart to compare."""
