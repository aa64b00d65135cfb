"""Exception types shared across the package."""


class ClipFreeError(Exception):
    """Base class for every error raised by clipfree."""


class StructuralError(ClipFreeError, ValueError):
    """Shapes, channel counts or parameters violate an operation's precondition."""


class FormatError(ClipFreeError, ValueError):
    """A file on disk is malformed (bad header, truncated payload, bad manifest)."""


class CalibrationError(ClipFreeError):
    """A calibration record does not cover the model being quantized."""


class ContractError(ClipFreeError):
    """An operation was called on the wrong kind of model (e.g. a clipped one)."""


class TrainingDiverged(ClipFreeError):
    """Loss or gradients became non-finite during training."""
