"""Exception hierarchy shared by every module."""


class SRError(Exception):
    """Base class for all toolkit errors."""


class InputError(SRError, ValueError):
    """Malformed structure, measure or scenario input."""


class DegenerateFrame(SRError):
    """The bracket growth condition fails somewhere on the box."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ChartDegenerate(SRError):
    """``A_{x1}`` vanishes where the chart normalization needs it nonzero."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class LeftDomain(SRError):
    """A trajectory left the working box."""

    def __init__(self, message, time=None, point=None):
        super().__init__(message)
        self.time = time
        self.point = point


class CertificateFailed(SRError):
    """An adjoint certificate residual exceeded its tolerance."""

    def __init__(self, message, node=None, quantity=None, value=None):
        super().__init__(message)
        self.node = node
        self.quantity = quantity
        self.value = value


class NotConverged(SRError):
    """No optimizer start reached the endpoint tolerance."""


class Infeasible(SRError):
    """Transport LP reported infeasibility (marginals inconsistent)."""


class UnstableGradient(SRError):
    """Finite-difference gradient changed too much under step halving."""


class AuditFailed(SRError):
    """A volume bound was violated."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class DegenerateSplit(SRError):
    """One class of a two-target split is empty."""
