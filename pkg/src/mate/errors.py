"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, TrainingAbort -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed or mismatched dataset content."""


class MMTSFormatError(DataError):
    """A file does not conform to the MMTS binary layout."""


class IngestError(DataError):
    """A raw-dataset ingestion step failed."""


class CheckpointError(DataError):
    """A checkpoint is unreadable or incompatible with the requested run."""


class TrainingAbort(RuntimeError):
    """Training stopped on a non-finite loss; carries diagnostic context."""

    def __init__(self, message, batch_index=None, components=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.components = components or {}
