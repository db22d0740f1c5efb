"""Error taxonomy shared by all modules.

Every failure mode that callers are expected to branch on gets its own class;
the CLI maps them onto the frozen exit-code contract (2 validation,
3 non-convergence, 4 verification breach).
"""


class AffineLQError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(AffineLQError):
    """Base class for configuration and model validation failures."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class BadDimensions(ValidationError):
    pass


class NonSymmetricS(ValidationError):
    pass


class NegativeS(ValidationError):
    pass


class UnboundedCoefficient(ValidationError):
    pass


class ForcingNotSquareIntegrable(ValidationError):
    pass


class ConfigError(ValidationError):
    """Structural problem in a scenario config document."""


class SolverError(AffineLQError):
    """Base class for numerical solver failures."""


class SingularInnerMatrix(SolverError):
    pass


class StepSizeUnderflow(SolverError):
    pass


class LostPositivity(SolverError):
    pass


class NoConvergence(SolverError):
    pass


class MonotonicityViolated(SolverError):
    pass


class NotStabilizable(SolverError):
    pass


class UnstableClosedLoop(SolverError):
    pass


class IllConditionedFundamental(SolverError):
    pass


class NonConvexStep(SolverError):
    pass


class NumericOverflow(SolverError):
    pass


class NonPositiveAlpha(SolverError):
    pass


class InsufficientGrid(SolverError):
    pass


class GridMismatch(AffineLQError):
    """Two objects that must share a grid or lattice do not."""


class MissingChild(AffineLQError):
    """A lattice node was queried without its full set of children."""
