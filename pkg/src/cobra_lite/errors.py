"""Exception types shared across the package."""


class CobraLiteError(Exception):
    """Base class for all package errors."""


class BagFormatError(CobraLiteError):
    """A bag file could not be parsed."""


class BagHeaderError(BagFormatError):
    """Bad magic, truncated or malformed header."""


class BagPayloadError(BagFormatError):
    """Payload size/shape disagrees with the header."""


class BagValueError(BagFormatError):
    """Payload contains non-finite values."""


class ConfigError(CobraLiteError):
    """Invalid run configuration (CLI exit code 2)."""


class MissingArtifactError(CobraLiteError):
    """A referenced corpus/checkpoint/file does not exist (CLI exit code 3)."""


class TrainingDivergedError(CobraLiteError):
    """Loss became NaN/Inf during optimization (CLI exit code 4)."""
