"""Exception types raised across the toolkit."""


class CromError(Exception):
    """Base class for all toolkit errors."""


class MeshGenerationFailure(CromError):
    pass


class TraceMismatch(CromError):
    pass


class ConvergenceFailure(CromError):
    pass


class SingularSystem(CromError):
    pass


class NonConvergence(CromError):
    pass


class DimensionMismatch(CromError, ValueError):
    pass


class InfeasibleTolerance(CromError):
    pass


class AllSolvesFailed(CromError):
    pass


class UnknownComponent(CromError, KeyError):
    pass


class NewtonDivergence(CromError):
    """Residual could not be decreased by any damped Newton step."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class MaxIterations(CromError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class MissingArtifact(CromError, FileNotFoundError):
    pass
