"""Exception hierarchy.

The CLI turns each family into its own nonzero exit code (see ``mvnash.cli``).
"""


class MvNashError(Exception):
    """Base class for all package errors."""


class ValidationError(MvNashError):
    """Invalid user input of any kind."""


class ConfigError(ValidationError):
    """Malformed configuration file; message carries the line when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateSharpe(ValidationError):
    pass


class BoundViolation(ValidationError):
    pass


class DriverMismatch(ValidationError):
    pass


class SolverError(MvNashError):
    """Numerical failure inside a solver."""


class SingularStep(SolverError):
    pass


class SingularGamma(SolverError):
    pass


class BoundCheckFailed(SolverError):
    pass


class DenominatorDegenerate(SolverError):
    pass


class Infeasible(SolverError):
    pass


class PicardDiverged(SolverError):
    pass


class MarginalCase(SolverError):
    pass


class NotMarginal(SolverError):
    pass


class ConsistencyViolation(SolverError):
    pass


class FixedPointViolation(SolverError):
    def __init__(self, agent, residual):
        self.agent = agent
        self.residual = residual
        super().__init__(f"best response of agent {agent} differs from profile by {residual:.3e}")


class NashViolation(MvNashError):
    def __init__(self, agent, deviation, eps, gap):
        self.agent = agent
        self.deviation = deviation
        self.eps = eps
        self.gap = gap
        super().__init__(
            f"agent {agent} gains {gap:.3e} by deviation {deviation!r} at eps={eps:g}"
        )
