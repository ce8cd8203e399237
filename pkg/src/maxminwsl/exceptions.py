class ConfigError(ValueError):
    """Raised when a run configuration (or a config-like argument) is invalid."""


class DatasetError(FileNotFoundError):
    """Raised when a dataset manifest or one of the files it references cannot be used."""

    def __init__(self, message: str, record: str | None = None):
        super().__init__(message)
        self.record = record


class NonFiniteLossError(RuntimeError):
    """Raised by the trainer when a step produces a NaN or infinite loss."""

    def __init__(self, message: str, breakdown=None, step: int | None = None):
        super().__init__(message)
        self.breakdown = breakdown
        self.step = step


class GradcheckFailure(AssertionError):
    """Raised when one or more finite-difference checks exceed their tolerance."""

    def __init__(self, message: str, failures: list | None = None):
        super().__init__(message)
        self.failures = failures or []
