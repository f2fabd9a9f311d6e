"""Exception types shared across the package."""


class MctsegError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MctsegError):
    """Operands have incompatible shapes for the requested op."""


class ShapeError(MctsegError):
    """Input dimensions violate an architectural constraint."""


class EmptyOutput(MctsegError):
    """A convolution would produce an output with a non-positive dimension."""


class NonScalarLoss(MctsegError):
    """backward() was called on a non-scalar tensor."""


class DetachedTensor(MctsegError):
    """backward() was called on a tensor that is not on any tape."""


class TapeConsumed(MctsegError):
    """backward() was called a second time on the same tape."""


class NonFiniteValue(MctsegError):
    """A forward op produced NaN/Inf from finite inputs (overflow)."""


class AllKeysMasked(MctsegError):
    """Attention received a key mask with no unmasked entries."""


class AllModalitiesMissing(MctsegError):
    """A modality mask with no available modalities reached the fusion stage."""


class MaskInputMismatch(MctsegError):
    """Provided modality inputs do not match the modality mask."""


class NonPositiveWeight(MctsegError):
    """Cross-entropy class weights must be strictly positive."""


class InvalidSpec(MctsegError):
    """Phantom spec violates nesting/size constraints."""


class CropTooLarge(MctsegError):
    """Requested crop exceeds the volume dimensions."""


class BadMagic(MctsegError):
    """File does not start with the expected magic bytes."""


class VersionUnsupported(MctsegError):
    """File format version is not supported."""


class TruncatedFile(MctsegError):
    """File ends before the header-declared payload."""


class NaNLoss(MctsegError):
    """Training produced a non-finite loss; carries the offending step index."""

    def __init__(self, step, message=""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class DigestMismatch(MctsegError):
    """Checkpoint config digest does not match the active config."""


class ConfigError(MctsegError):
    """Run configuration is malformed or out of range."""
