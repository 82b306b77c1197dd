"""Exception hierarchy shared by every martinlab module.

Each class carries the CLI exit code it maps to: 2 for inputs or questions that
cannot be answered on the given tree, 3 for numerical failures.
"""
from dataclasses import dataclass
from typing import Any, List, Optional


class MartinLabError(RuntimeError):
    exit_code = 2


# --- tree descriptions -----------------------------------------------------

@dataclass(frozen=True)
class SpecIssue:
    kind: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind} at {self.location}: {self.message}"


class InvalidSpec(MartinLabError):
    def __init__(self, issues: List[SpecIssue]):
        self.issues = list(issues)
        lines = "; ".join(str(issue) for issue in self.issues)
        super().__init__(f"invalid tree description ({len(self.issues)} issue(s)): {lines}")


class NotATree(InvalidSpec):
    pass


class ProbabilitySum(InvalidSpec):
    pass


class NonPositiveEdge(InvalidSpec):
    pass


# --- addressing and geometry ----------------------------------------------

class UnknownVertex(MartinLabError):
    pass


class NonCoreSupport(MartinLabError):
    pass


class NotAdjacent(MartinLabError):
    pass


class VertexOutsideHull(MartinLabError):
    pass


# --- measures and boundary functions ---------------------------------------

class InvalidMeasure(MartinLabError):
    pass


class BadAntichain(MartinLabError):
    pass


class MissingValue(MartinLabError):
    pass


class NotIntegrable(MartinLabError):
    pass


class InvalidWalkConfig(MartinLabError):
    pass


# --- potential theory preconditions ----------------------------------------

class RecurrentWalk(MartinLabError):
    pass


class DegenerateCylinder(MartinLabError):
    pass


# --- numerics ---------------------------------------------------------------

class SolverError(MartinLabError):
    exit_code = 3


class MaxIterExceeded(SolverError):
    def __init__(self, message: str, best: Optional[Any] = None):
        super().__init__(message)
        self.best = best


class NotConverged(SolverError):
    pass


class InconsistentConditions(SolverError):
    pass
