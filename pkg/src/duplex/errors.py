"""Exception types shared across the package."""


class DuplexError(Exception):
    """Base class for all package errors."""


class NoConvergence(DuplexError):
    def __init__(self, max_iter, residual, context=""):
        self.max_iter = max_iter
        self.residual = residual
        msg = f"no convergence after {max_iter} iterations (relative residual {residual:.3e})"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class ZeroPivot(DuplexError):
    pass


class DegenerateFit(DuplexError):
    pass


class SampleNearDiscontinuity(DuplexError):
    pass


class ResolutionTooCoarse(DuplexError):
    pass


class IncompatibleFlux(DuplexError):
    pass


class CouplingDiverged(DuplexError):
    def __init__(self, message, trace=()):
        self.trace = list(trace)
        super().__init__(message)


class InvalidData(DuplexError):
    pass


class HolesTouch(DuplexError):
    pass


class HoleOnBoundary(DuplexError):
    pass


class GridMismatch(DuplexError):
    pass


class ParseError(DuplexError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ValidationError(DuplexError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
