"""Exception types shared across the package."""

from __future__ import annotations


class ReporagError(Exception):
    """Base class. ``reason`` is a short machine-readable tag."""

    def __init__(self, message: str, reason: str | None = None):
        super().__init__(message)
        self.reason = reason


class IngestError(ReporagError):
    pass


class SampleError(ReporagError):
    pass


class DatasetError(ReporagError):
    pass


class LmError(ReporagError):
    pass


class RetrieverError(ReporagError):
    pass


class CheckpointError(ReporagError):
    pass


class GenError(ReporagError):
    pass


class DatasetWarning(UserWarning):
    """Emitted when fewer samples than requested could be drawn."""
