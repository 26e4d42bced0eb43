"""
Exception hierarchy shared by the simulator modules.

Every error carries the process exit code the CLI reports for it.
"""

from dataclasses import dataclass
from typing import List, Optional


@dataclass(frozen=True)
class Violation:
    """One broken rule, named by the entity it applies to"""

    entity: str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        text = f"{self.entity}: {self.rule}"
        return f"{text} ({self.detail})" if self.detail else text


class SimulationToolError(Exception):
    exit_code = 1


class ValidationError(SimulationToolError):
    """Case, network or device data that breaks an invariant"""

    exit_code = 1

    def __init__(self, message: str, violations: Optional[List[Violation]] = None):
        self.violations = list(violations or [])
        if self.violations:
            message = message + "\n" + "\n".join(f"  • {v}" for v in self.violations)
        super().__init__(message)


class CaseParseError(ValidationError):
    def __init__(self, path: str, line: int, column: int, reason: str):
        self.path = path
        self.line = line
        self.column = column
        super().__init__(f"{path}:{line}:{column}: {reason}")


class NumericalError(SimulationToolError):
    exit_code = 2


class PowerFlowError(NumericalError):
    def __init__(self, message: str, mismatch: float = float("nan"), iteration: int = 0):
        self.mismatch = mismatch
        self.iteration = iteration
        super().__init__(message)


class SimulationError(NumericalError):
    """Step failure; keeps whatever was integrated before it"""

    def __init__(self, message: str, time: float = float("nan"),
                 residual: float = float("nan"), partial=None):
        self.time = time
        self.residual = residual
        self.partial = partial
        super().__init__(message)


class IdentityBreach(SimulationToolError):
    exit_code = 3


class StageError(SimulationToolError):
    """Failure inside one stage of a scenario run"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
        super().__init__(f"[{stage}] {cause}")
