"""Exception types raised by marksman."""

from typing import Optional


class MarksmanError(Exception):
    """Base class for all marksman errors."""


class ConfigurationError(MarksmanError, ValueError):
    """Invalid configuration: unknown key, out-of-range value or unsupported choice."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class IngestionError(MarksmanError, OSError):
    """A dataset file is missing or cannot be decoded."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class InputError(MarksmanError, ValueError):
    """Tensor arguments do not satisfy an operation's preconditions."""


class TrainingError(MarksmanError, RuntimeError):
    """Training diverged or otherwise could not continue."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration


class StageError(MarksmanError, RuntimeError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
