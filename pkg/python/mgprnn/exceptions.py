"""Exceptions raised by the mgprnn package.

Every error derives from `MgpRnnError`. The command line maps each family to
an exit code through `exit_code_for`.
"""

from __future__ import annotations

__all__ = [
    "MgpRnnError",
    "ConfigError",
    "DataError",
    "ParseError",
    "ValidationError",
    "GenerationError",
    "ShapeError",
    "ContractError",
    "InvalidHyperparameterError",
    "InvalidInputError",
    "NumericalError",
    "TrainingError",
    "MetricUndefinedError",
    "exit_code_for",
]


class MgpRnnError(Exception):
    """Base class for all package errors."""


class ConfigError(MgpRnnError):
    """Invalid or unknown configuration."""


class DataError(MgpRnnError):
    """Cohort, checkpoint or manifest content that cannot be used."""


class ParseError(DataError):
    """A cohort line that is not valid JSON or lacks required fields."""

    def __init__(self, message: str, line_number: int | None = None) -> None:
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ValidationError(DataError):
    """Parsed data that violates a record invariant."""


class GenerationError(DataError):
    """The synthetic cohort generator cannot satisfy its spec."""


class ShapeError(MgpRnnError, ValueError):
    """Operand shapes that do not fit the requested operation."""


class ContractError(MgpRnnError):
    """An API used outside its contract (e.g. backward from a non-scalar)."""


class InvalidHyperparameterError(MgpRnnError, ValueError):
    """A hyperparameter outside its admissible range."""


class InvalidInputError(MgpRnnError, ValueError):
    """An input vector or array that an algorithm cannot start from."""


class NumericalError(MgpRnnError):
    """A Krylov solve that broke down or failed to converge."""

    def __init__(
        self,
        message: str,
        iteration: int | None = None,
        encounter_id: str | None = None,
    ) -> None:
        if encounter_id is not None:
            message = f"encounter {encounter_id}: {message}"
        super().__init__(message)
        self.iteration = iteration
        self.encounter_id = encounter_id

    def with_encounter(self, encounter_id: str) -> "NumericalError":
        if self.encounter_id is not None:
            return self
        return NumericalError(str(self), self.iteration, encounter_id)


class TrainingError(NumericalError):
    """Optimizer state that cannot be advanced (non-finite gradients)."""

    def __init__(self, message: str, parameter: str | None = None) -> None:
        super().__init__(message)
        self.parameter = parameter


class MetricUndefinedError(MgpRnnError):
    """A discrimination metric requested on a cohort lacking a class."""


_EXIT_CODES: tuple[tuple[type[MgpRnnError], int], ...] = (
    (ConfigError, 2),
    (DataError, 3),
    (MgpRnnError, 4),
)


def exit_code_for(exc: BaseException) -> int:
    """Exit code for an exception: config=2, data=3, numerical and others=4."""
    for cls, code in _EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1
