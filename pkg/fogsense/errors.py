"""
Exception hierarchy

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Optional


class FogError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(FogError):
    """Invalid configuration value."""

    exit_code = 3

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(FogError):
    """Unusable input data (missing files, empty corpus, bad shapes)."""

    exit_code = 4


class ParseError(DataError):
    """Malformed DAPHNet line."""

    def __init__(self, source: str, line: int, message: str):
        self.source = source
        self.line = line
        super().__init__(f"{source}:{line}: {message}")


class StratificationError(DataError):
    """A split or fold cannot be stratified with the given class counts."""


class SchemaError(DataError):
    """Input dimensions do not match what a model or manifest expects."""


class FeatureError(DataError):
    """Feature extraction produced non-finite values."""


class FormatError(FogError):
    """Binary file could not be decoded."""

    exit_code = 5
    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class TruncatedError(FormatError):
    code = "truncated"


class TrainingError(FogError):
    """Model training failed (diverged, degenerate labels)."""

    exit_code = 6

    def __init__(self, message: str, epoch: Optional[int] = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
