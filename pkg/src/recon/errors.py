"""Exception types shared across the package."""


class ReconError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ReconError):
    """A configuration value violates its invariants."""


class IngestError(ReconError):
    """A corpus file could not be parsed.

    Carries the offending line number when one is known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DocumentTooShort(ReconError):
    """Skip signal: a document cannot supply a span under the crop config."""


class TrainError(ReconError):
    """The training loop cannot proceed (for example an empty batch)."""


class EvalError(ReconError):
    """Retrieval evaluation was given inconsistent runs or judgments."""
