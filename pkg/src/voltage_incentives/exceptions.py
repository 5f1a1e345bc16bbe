"""Exception hierarchy. CLI exit codes key off these classes."""


class VoltageIncentivesError(Exception):
    pass


class NetworkFormatError(VoltageIncentivesError, ValueError):
    pass


class PowerFlowError(VoltageIncentivesError):
    pass


class NonConvergence(PowerFlowError):
    """Newton iterations ended with the mismatch above tolerance."""


class SingularJacobian(NonConvergence):
    """Power-flow Jacobian could not be factorized (voltage collapse region)."""


class SignConventionViolation(VoltageIncentivesError):
    """A linearized self-sensitivity X_ii is not strictly negative."""


class InnerLoopStall(VoltageIncentivesError):
    def __init__(self, message, residual=float("nan"), iterations=0, trace=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.trace = trace


class OracleNoConvergence(VoltageIncentivesError):
    """Best-response sweep in the equilibrium oracle failed to reach a fixed point."""


class PlantInfeasible(VoltageIncentivesError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ParseError(VoltageIncentivesError, ValueError):
    pass


class ValidationError(VoltageIncentivesError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
