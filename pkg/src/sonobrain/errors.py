"""Exception types shared across the package."""


class SonobrainError(Exception):
    """Base class for all package-specific errors."""


class IoFailureError(SonobrainError):
    """A file could not be read or written."""


class BadMagicError(IoFailureError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(IoFailureError):
    """File payload is shorter than the header declares."""


class NonPositiveDimError(SonobrainError):
    """A voxel-count dimension is zero or negative."""


class NonPositiveSpacingError(SonobrainError):
    """A voxel spacing is zero, negative, or not finite."""


class ShapeMismatchError(SonobrainError):
    """Tensor or volume shapes are incompatible for the operation."""


class IndivisibleDimError(SonobrainError):
    """A spatial dimension is not divisible by the pooling window."""


class LengthMismatchError(SonobrainError):
    """Two vectors that must have equal length do not."""


class NonDifferentiablePointError(SonobrainError):
    """Gradient check requested at a kink or tie point."""


class InvalidSpecError(SonobrainError):
    """Network hyperparameters violate their invariants."""


class SpecMismatchError(SonobrainError):
    """Checkpoint spec does not match the expected network spec."""


class InvalidTransformError(SonobrainError):
    """Similarity transform parameters are invalid."""


class NotARotationError(SonobrainError):
    """Matrix is not orthonormal with determinant +1."""


class GaOutOfRangeError(SonobrainError):
    """Gestational age outside the supported range."""


class OutOfFieldError(SonobrainError):
    """Generated structure touches the grid boundary."""


class EmptyMaskError(SonobrainError):
    """A metric that needs a nonempty mask received an empty one."""


class ConstantSeriesError(SonobrainError):
    """Correlation requested on a zero-variance series."""


class DegenerateSeriesError(SonobrainError):
    """Statistical test requested on a series that is too short or constant."""


class EmptyListError(SonobrainError):
    """An aggregation received no cases."""


class ZeroMassError(SonobrainError):
    """Ellipsoid fit requested on a volume with no probability mass."""


class InsufficientCasesError(SonobrainError):
    """Fold split requested with more cases than the manifest holds."""
