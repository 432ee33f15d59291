"""Exception types shared across the package."""


class DomainError(ValueError):
    """A value lies outside its declared domain, or inputs are inconsistent."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite intermediate or lost positive definiteness."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed; the message names the offending line."""


class InnerRunDiverged(RuntimeError):
    """A short fine-tuning run hit a non-finite loss; the trial is marked failed."""


class StudyFailure(RuntimeError):
    """Every trial of a study failed. Carries the full trial history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


class ConfigError(ValueError):
    """A run configuration failed validation."""
