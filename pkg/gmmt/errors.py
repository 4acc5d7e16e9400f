from __future__ import annotations

from pathlib import Path


class ConfigurationError(ValueError):
    pass


class ShapeError(ConfigurationError):
    pass


class DataError(RuntimeError):
    pass


class EmptyInputError(DataError):
    pass


class CorruptFileError(DataError):
    pass


class MissingCheckpointError(DataError):
    pass


class NumericError(ArithmeticError):
    pass


class NonFiniteError(NumericError):
    pass


class DegenerateBatchError(NumericError):
    pass


class TrainingAborted(NumericError):
    def __init__(self, message: str, *, checkpoint_path: Path | None = None) -> None:
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


# CLI exit codes per failure family.
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return 1
