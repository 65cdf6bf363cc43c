"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to.
"""


class ThumbNetError(Exception):
    exit_code = 1


class UsageError(ThumbNetError):
    """Bad arguments, configuration, or call sequence."""

    exit_code = 2


class ShapeError(UsageError):
    """Operand shapes incompatible with an operation."""


class GeometryError(ShapeError):
    """Spatial extents that a layer or builder cannot accommodate."""


class DataFormatError(ThumbNetError):
    """Malformed dataset, tensor, image, or checkpoint bytes."""

    exit_code = 3


class CorruptionError(DataFormatError):
    pass


class VersionError(DataFormatError):
    pass


class NumericFault(ThumbNetError):
    """NaN or Inf produced where finite values are required."""

    exit_code = 4

    def __init__(self, message, checkpoint=None):
        if checkpoint is not None:
            message = f"{message} (last good checkpoint: {checkpoint})"
        super().__init__(message)
        self.checkpoint = checkpoint
