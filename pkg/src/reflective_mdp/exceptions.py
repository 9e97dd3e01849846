"""Exception types mapped onto the CLI exit codes."""


class ValidationError(ValueError):
    """An argument or config value violates a documented precondition."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace


class CertificateViolation(AssertionError):
    """A bound that must always hold was violated beyond tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
