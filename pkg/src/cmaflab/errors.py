"""Exception hierarchy shared by every module."""


class CMAFError(Exception):
    """Base class for all errors raised by cmaflab."""


class ConfigurationError(CMAFError, ValueError):
    pass


class GeometryError(CMAFError):
    """A geometric construction failed its positivity verification."""

    def __init__(self, message, margin=None, node=None):
        super().__init__(message)
        self.margin = margin
        self.node = node


class DomainError(CMAFError, ValueError):
    pass


class AdmissibilityError(CMAFError):
    """omega + dd^c phi is not positive semidefinite at some node."""

    def __init__(self, message, eigenvalue=None, node=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.node = node


class SolverError(CMAFError):
    """Newton or fixed-point iteration failed to converge."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class StepError(SolverError):
    pass


class PreconditionError(CMAFError):
    pass
