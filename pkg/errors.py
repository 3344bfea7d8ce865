"""
Errors module for the Wav2DF toolkit
Every domain failure raises a subclass of Wav2DFError carrying a machine-readable category
"""

from typing import Optional


class Wav2DFError(ValueError):
    """Base class for every error raised by the toolkit."""

    category = "internal"

    def __init__(self, message: str, *, line: Optional[int] = None, offset: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        if offset is not None:
            message = f"offset {offset}: {message}"
        super().__init__(message)
        self.line = line
        self.offset = offset


class NumericsError(Wav2DFError):
    category = "numerics"


class EncoderError(Wav2DFError):
    category = "encoder"


class PeftError(Wav2DFError):
    category = "peft"


class HamoeError(Wav2DFError):
    category = "hamoe"


class ClassifierError(Wav2DFError):
    category = "classifier"


class DataError(Wav2DFError):
    category = "data"


class StorageError(Wav2DFError):
    category = "storage"


class TrainingError(Wav2DFError):
    category = "training"


class MetricsError(Wav2DFError):
    category = "metrics"


class ConfigError(Wav2DFError):
    category = "config"


# Process exit codes used by the CLI, keyed by category
EXIT_CODES = {
    "config": 2,
    "storage": 3,
    "data": 4,
    "training": 5,
    "metrics": 6,
}
DEFAULT_EXIT_CODE = 7


def exit_code_for(error: Wav2DFError) -> int:
    """Map an error to the CLI exit code of its category."""
    return EXIT_CODES.get(error.category, DEFAULT_EXIT_CODE)
