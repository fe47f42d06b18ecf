"""Exception hierarchy shared by all sisc modules."""


class SiscError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SiscError):
    """A config, shape, or hyperparameter violates a documented precondition."""


class DataError(SiscError):
    """Input data is malformed, inconsistent, or out of the accepted domain."""


class NumericError(SiscError):
    """A computation produced non-finite values or diverged."""


class InternalConsistencyError(SiscError):
    """Internal state disagrees with itself (e.g. stale trace, bad switch index)."""


class ManifestError(DataError):
    """Annotation manifest failed to parse; collects all row errors at once."""

    def __init__(self, row_errors):
        self.row_errors = list(row_errors)
        super().__init__("manifest invalid:\n" + "\n".join(self.row_errors))


class CheckpointError(SiscError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Magic bytes or format version do not match this implementation."""


class CheckpointChecksumError(CheckpointError):
    """File is truncated or its trailing CRC does not match the content."""


class CheckpointStructureError(CheckpointError):
    """Config block and parameter blobs disagree (e.g. wrong blob sizes)."""
