"""Exception hierarchy shared across the pipeline.

The CLI maps these onto its exit-code contract: file/format problems
exit 1, validation problems exit 2, numeric failures exit 3.
"""


class LymphomilError(Exception):
    """Base class for all package errors."""


class ValidationError(LymphomilError):
    """Invalid inputs, configuration, or violated preconditions."""


class EmptyBagError(ValidationError):
    """A slide bag with zero patches, which the model cannot score."""


class UndefinedMetricError(ValidationError):
    """A metric whose definition degenerates on the given data."""


class FileFormatError(LymphomilError):
    """A file that does not match its declared format (magic, version)."""


class CorruptionError(FileFormatError):
    """A structurally valid header whose payload is truncated or invalid."""


class UnsupportedDepthError(FileFormatError):
    """A PGM/PPM maxval outside the depths this pipeline supports."""


class NumericError(LymphomilError):
    """Non-finite values encountered where the math requires finite ones."""
