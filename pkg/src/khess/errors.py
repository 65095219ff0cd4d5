class KHessError(Exception):
    pass


class DomainError(KHessError, ValueError):
    """An argument lies outside the domain where the operation is defined."""


class DegenerateSpectrumError(DomainError):
    pass


class AdmissibilityError(KHessError):
    """A Hessian spectrum left the (closed) Garding cone."""


class GrowthViolationError(KHessError):
    pass


class NonConvergenceError(KHessError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConeViolationError(NonConvergenceError):
    """Damping could not keep the Newton iterate admissible."""
