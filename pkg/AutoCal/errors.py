# errors.py — exception hierarchy; every error carries a short machine-readable reason
from __future__ import annotations
from typing import Optional


class AutoCalError(Exception):
    """Base class. `reason` is a short snake_case tag (surfaced by the CLI and HTTP layer)."""
    reason = "autocal_error"

    def __init__(self, message: str = "", *, reason: Optional[str] = None):
        super().__init__(message or self.reason)
        if reason:
            self.reason = reason


# ---------------- geometry ----------------
class CameraModelError(AutoCalError):
    reason = "camera_model"

class NonPositiveDepth(CameraModelError):
    reason = "non_positive_depth"

class BehindCamera(NonPositiveDepth):
    reason = "behind_camera"


# ---------------- estimation ----------------
class SolverError(AutoCalError):
    reason = "solver"

class NumericalFailure(SolverError):
    reason = "numerical_failure"

class SingularInformation(SolverError):
    reason = "singular_information"

class DegenerateMean(SolverError):
    reason = "degenerate_mean"

class SingularCovariance(SolverError):
    reason = "singular_covariance"

class SolveFailed(SolverError):
    reason = "solve_failed"


# ---------------- statistics ----------------
class StatsError(AutoCalError):
    reason = "stats"

class DomainError(StatsError, ValueError):
    reason = "domain_error"

class SingularCombinedCovariance(StatsError):
    reason = "singular_combined_covariance"

class DegenerateDof(StatsError):
    reason = "degenerate_dof"


# ---------------- scenarios / reports ----------------
class ScenarioError(AutoCalError):
    reason = "scenario"

class ScenarioParseError(ScenarioError):
    reason = "scenario_parse"

class InfeasibleScenario(ScenarioError):
    reason = "infeasible_scenario"

class ReportError(AutoCalError):
    reason = "report"

class MismatchedScenarios(ReportError):
    reason = "mismatched_scenarios"
