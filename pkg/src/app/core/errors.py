from __future__ import annotations

from typing import Optional


class LabError(Exception):
    """Базовая ошибка лаборатории; ``exit_code`` уходит в код возврата CLI."""

    exit_code: int = 1

    def __init__(self, message: str, *, step: Optional[int] = None, index: Optional[int] = None) -> None:
        super().__init__(message)
        self.step = step
        self.index = index


class ConfigError(LabError, ValueError):
    exit_code = 2


class ShapeMismatchError(ConfigError):
    pass


class CapabilityError(LabError):
    exit_code = 2


class ArtifactExistsError(LabError):
    exit_code = 2


class NumericError(LabError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    pass


class SingularityError(NumericError):
    pass


class StateError(LabError, RuntimeError):
    exit_code = 1


class InvariantViolation(LabError):
    exit_code = 4
