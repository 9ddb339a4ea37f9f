"""Exception hierarchy shared by every propgcn module."""

from typing import Optional


class PropGcnError(Exception):
    """Base class for all errors raised by propgcn."""


class IntervalError(PropGcnError):
    """An interval is degenerate or could not be decoded."""


class ConfigError(PropGcnError):
    """A configuration value is out of range or unknown."""


class DimensionError(PropGcnError):
    """Array shapes do not line up."""


class DataFormatError(PropGcnError):
    """A file on disk does not match its documented format."""

    def __init__(self, path, reason: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        self.reason = reason
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {reason}")


class CheckpointError(DataFormatError):
    """Checkpoint file is corrupt, truncated or from another version."""


class DivergenceError(PropGcnError):
    """Loss or gradients became non-finite."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)


class ExternalScoreError(PropGcnError):
    """External video-level scores are missing for a video."""


class EvaluationError(PropGcnError):
    """Evaluation inputs are inconsistent or empty."""
