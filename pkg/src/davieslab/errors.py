"""Exception hierarchy shared by every stage of the laboratory."""


class DaviesLabError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigurationError(DaviesLabError, ValueError):
    exit_code = 2


class DimensionError(DaviesLabError, ValueError):
    exit_code = 2


class DomainError(DaviesLabError, ValueError):
    exit_code = 2


class PreconditionError(DaviesLabError, ValueError):
    exit_code = 2


class BoundaryError(PreconditionError):
    """A ball or annulus reaches the truncation boundary of the graph."""


class NumericalError(DaviesLabError, ArithmeticError):
    exit_code = 3


class AmplitudeError(NumericalError):
    """exp(psi) would leave the floating range."""


class ConvergenceError(NumericalError):
    pass


class InsufficientDataError(DaviesLabError, ValueError):
    exit_code = 4
