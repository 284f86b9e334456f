"""Exception types raised across the package."""


class DdlspgError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DdlspgError, ValueError):
    pass


class NonFiniteState(DdlspgError, ValueError):
    pass


class ParameterOutOfDomain(DdlspgError, ValueError):
    pass


class NonConvergence(DdlspgError, RuntimeError):
    """Iterative solver hit its iteration cap.

    ``history`` holds whatever per-iteration trace the solver kept.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class SingularJacobian(DdlspgError, RuntimeError):
    pass


class SingularDenominator(DdlspgError, ValueError):
    pass


class DegenerateSplit(DdlspgError, ValueError):
    pass


class TestFunctionRankFailure(DdlspgError, RuntimeError):
    __test__ = False


class ZeroSnapshots(DdlspgError, ValueError):
    pass


class EmptyBoundaryBasis(DdlspgError, ValueError):
    pass


class InsufficientBudget(DdlspgError, ValueError):
    pass


class SampleRankFailure(DdlspgError, RuntimeError):
    pass


class GappyRankDeficient(DdlspgError, ValueError):
    pass


class NonFiniteAssembly(DdlspgError, FloatingPointError):
    pass


class SingularSaddle(DdlspgError, RuntimeError):
    pass


class PortMismatch(DdlspgError, ValueError):
    def __init__(self, discrepancy):
        super().__init__(f"port values disagree by {discrepancy:.3e}")
        self.discrepancy = float(discrepancy)


class UnsupportedPortGeometry(DdlspgError, ValueError):
    pass


class ZeroReference(DdlspgError, ZeroDivisionError):
    pass


class EmptyInput(DdlspgError, ValueError):
    pass
