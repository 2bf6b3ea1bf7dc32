"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class HidsError(Exception):
    exit_code = 1


class ConfigError(HidsError, ValueError):
    """Bad configuration, bad arguments or a precondition violated by the caller."""

    exit_code = 2


class DataError(HidsError, ValueError):
    """Input data or a model is incompatible with what the operation expects."""

    exit_code = 3


class IngestError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(HidsError):
    """Training produced non-finite values."""

    exit_code = 4

    def __init__(self, message, stage=None, trace=None):
        super().__init__(message)
        self.stage = stage
        self.trace = trace or []


class BundleError(DataError):
    """Corrupt, truncated or incompatible model bundle."""
