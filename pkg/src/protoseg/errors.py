"""Exception types shared across the package."""


class ProtosegError(Exception):
    """Base class for all package-specific errors."""


class EmptySupportError(ProtosegError):
    """Support mask contains no valid (non-ignore) pixel."""


class ClassAbsentError(ProtosegError):
    """Requested class has no pixel at feature resolution."""


class AllIgnoredError(ProtosegError):
    """Loss target contains no valid pixel."""


class EpisodeSamplingError(ProtosegError):
    """Episode sampling exhausted its retry budget on degenerate draws."""


class SchemaError(ProtosegError):
    """Data on disk violates the declared schema (labels, shapes, channels)."""


class FileFormatError(ProtosegError):
    """Binary artifact is corrupt, truncated, or has an unsupported version."""


class CheckpointMismatchError(ProtosegError):
    """Checkpoint config does not match the expected encoder config."""


class TrainingDivergedError(ProtosegError):
    """Training aborted on a non-finite loss."""
