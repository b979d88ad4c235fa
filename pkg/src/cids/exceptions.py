"""Exception types shared across the package."""


class CIDSError(Exception):
    """Base class for all package errors."""


class StructuralAssumptionError(CIDSError, ValueError):
    """A graph or mask violates the structural assumptions (self-edges, layering)."""


class ConfigError(CIDSError, ValueError):
    """An environment, learner or policy configuration is invalid."""


class DataError(CIDSError, ValueError):
    """Input data is malformed, unnormalized or insufficient."""


class LogParseError(DataError):
    """A trajectory log or serialized artifact could not be parsed.

    ``line`` is the 1-based line number of the offending line and
    ``last_good_line`` the last line that parsed cleanly.
    """

    def __init__(self, message, line=None, last_good_line=None):
        self.line = line
        self.last_good_line = last_good_line
        super().__init__(message)


class StageError(CIDSError):
    """A pipeline stage was invoked without the artifacts it depends on."""


class FingerprintMismatchWarning(UserWarning):
    """A trajectory log was produced by a different environment configuration."""


class DegenerateMaskWarning(UserWarning):
    """The learned action mask selected no state dimensions."""
