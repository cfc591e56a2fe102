"""Exception types raised across the package."""


class BSPSError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(BSPSError, ValueError):
    """A matrix could not be Cholesky-factorized even after jitter escalation."""


class RankDeficient(BSPSError, ValueError):
    """Design matrix cross-product is not invertible."""


class KindMismatch(BSPSError, TypeError):
    """Forecast kind (gaussian/bernoulli) does not fit the requested operation."""


class EmptyData(BSPSError, ValueError):
    pass


class LengthMismatch(BSPSError, ValueError):
    pass


class SingleClass(BSPSError, ValueError):
    """ROC AUC requested on labels that contain only one class."""


class SamplerStall(BSPSError, RuntimeError):
    """The Polya-gamma rejection sampler exceeded its proposal budget."""


class SchemaError(BSPSError, ValueError):
    """Input file does not match the expected layout.

    ``row`` and ``column`` locate the offending cell when known (1-based row,
    counting the header as row 1).
    """

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ArtifactMismatch(BSPSError, ValueError):
    """Fitted artifact is incompatible with the prediction inputs."""


class UnknownExperiment(BSPSError, ValueError):
    pass


class ConfigError(BSPSError, ValueError):
    """Invalid or unknown configuration value."""
