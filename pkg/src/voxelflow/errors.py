"""Exception types shared across the package.

Everything raised on purpose derives from VoxelflowError so callers (and the
CLI error reporter) can catch one base class. File-system problems are left to
the built-in OSError family.
"""


class VoxelflowError(Exception):
    """Base class for all package-specific errors."""


class FormatError(VoxelflowError):
    """File or buffer content violates the expected layout."""


class GenerationError(VoxelflowError):
    """Synthetic scene constraints could not be satisfied."""


class DuplicateCoordError(VoxelflowError):
    """A coordinate appears more than once where uniqueness is required."""


class InvalidKernelError(VoxelflowError):
    """Kernel size/dilation/stride combination is not supported."""


class GridTooLargeError(VoxelflowError):
    """Refusing to densify a grid beyond the configured cell budget."""


class ShapeMismatchError(VoxelflowError):
    """Array shapes disagree with the declared channel/parameter layout."""


class NonScalarLossError(VoxelflowError):
    """backward() requires a scalar loss node."""


class EmptySpecError(VoxelflowError):
    """A kernel spec must contain at least one stage."""


class InvalidReceptiveFieldError(VoxelflowError):
    """Target receptive field must be odd and >= 3 to decouple."""


class NonSubmanifoldStageError(VoxelflowError):
    """Fusion stages require submanifold convolutions (stride 1)."""


class LengthMismatchError(VoxelflowError):
    """Parallel sequences differ in length."""


class EmptyBatchError(VoxelflowError):
    """A loss was requested over zero elements."""


class NoGroundTruthError(VoxelflowError):
    """AP is undefined for an empty ground-truth bucket."""


class DivergedLossError(VoxelflowError):
    """Training loss became NaN or infinite."""


class ConfigError(VoxelflowError):
    """Run configuration is malformed or contains unknown keys."""
