"""Exception taxonomy shared across the toolkit.

Every error raised on a contract boundary derives from Seq2BoldError so the
CLI can map failures to exit codes without enumerating causes.
"""
from __future__ import annotations


class Seq2BoldError(Exception):
    """Base class for all toolkit errors."""


class FormatError(Seq2BoldError):
    """A binary or text artifact does not match its declared format."""


class TruncationError(FormatError):
    """Payload length disagrees with the header-declared shape."""


class DataError(Seq2BoldError):
    """Loaded values violate a data invariant (non-finite entries, etc.)."""


class ManifestError(Seq2BoldError):
    """A dataset manifest is missing files or carries unknown/invalid fields."""


class ConfigError(Seq2BoldError):
    """A configuration value violates a structural constraint."""


class ContractError(Seq2BoldError):
    """An operation was called outside its documented precondition."""


class SubjectNotFoundError(Seq2BoldError):
    """A subject id is absent from the checkpoint's subject table."""


class DuplicateSubjectError(Seq2BoldError):
    """Attempt to register a subject id that already exists."""


class UndefinedScoreError(Seq2BoldError):
    """Score aggregation found no defined correlation entries."""


class GradCheckError(Seq2BoldError):
    """Gradient check aborted, e.g. on a non-finite loss."""


class TrainingAbortError(Seq2BoldError):
    """Training stopped on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
