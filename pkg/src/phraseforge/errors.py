"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigurationError and NotFoundError are
usage problems (exit 2), everything else is a runtime failure (exit 1).
"""


class PhraseForgeError(Exception):
    """Base class for all package errors."""


class ParseError(PhraseForgeError):
    """Malformed input record. Carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(PhraseForgeError):
    """Structurally valid input that violates a dataset invariant."""


class NotFoundError(PhraseForgeError):
    """A referenced path, turn, or record does not exist."""


class ConfigurationError(PhraseForgeError):
    """Bad parameter value, dimension mismatch, or invalid configuration."""


class TransportError(PhraseForgeError):
    """Remote encoder connection failure. Retryable by the caller."""

    retryable = True


class ProtocolError(PhraseForgeError):
    """Remote encoder replied with a malformed or inconsistent response."""


class IndexFormatError(PhraseForgeError):
    """Index file is truncated, has a bad header, or does not match the corpus."""


class NumericError(PhraseForgeError):
    """Non-finite value encountered where the math requires finite inputs."""


class TrainingDiverged(PhraseForgeError):
    """Training aborted on a non-finite or exploding loss.

    The per-step reports gathered up to the failure are attached so callers
    can inspect the trajectory.
    """

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory
