"""Exception hierarchy.

Input problems derive from :class:`InputError` (CLI exit code 1); numerical
infeasibility derives from :class:`InfeasibleError` (CLI exit code 2).
"""


class RadialVSIError(Exception):
    """Base class for all package errors."""


class InputError(RadialVSIError, ValueError):
    pass


class InfeasibleError(RadialVSIError):
    pass


class MalformedFile(InputError):
    pass


class NotATree(InputError):
    pass


class DuplicateParent(NotATree):
    pass


class BadImpedance(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class DegenerateDirection(InputError):
    pass


class InvalidPartition(InputError):
    pass


class NotConnected(InputError):
    pass


class NotConverged(InfeasibleError):
    def __init__(self, message, iterations=None, residual_norm=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm


class BaseInfeasible(InfeasibleError):
    pass


class NegativeDeterminant(InfeasibleError):
    def __init__(self, message, sign=None, log_abs=None):
        super().__init__(message)
        self.sign = sign
        self.log_abs = log_abs


class NonpositiveDiagTerm(InfeasibleError):
    """Raised when one or more diagonal terms are <= 0.

    ``buses`` lists the offending bus ids (1-based, i.e. the child bus of the
    weak line).
    """

    def __init__(self, buses):
        self.buses = list(buses)
        super().__init__(f"nonpositive diagonal term at bus(es) {self.buses}")


class RhoOutOfRange(InfeasibleError):
    pass
