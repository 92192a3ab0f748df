"""Exception types shared across the package."""


class SamlError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SamlError, ValueError):
    pass


class DoubleBackwardError(SamlError, RuntimeError):
    pass


class NumericError(SamlError, FloatingPointError):
    """A non-finite value appeared in a loss, gradient or input."""


class QuantizationError(SamlError, ValueError):
    pass


class FormatError(SamlError, ValueError):
    """A quantised payload is malformed (e.g. a code outside the codebook)."""


class ValidationError(SamlError, ValueError):
    """Inputs are well-typed but violate a protocol rule (config, stage order, speakers)."""


class ConfigError(ValidationError):
    pass


class StageOrderError(ValidationError):
    pass


class SpeakerOverlapError(ValidationError):
    pass


class CorpusError(ValidationError):
    pass


class PruneError(ValidationError):
    pass


class CheckpointError(SamlError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownDtypeError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    """Payload checksum mismatch; ``tensor`` names the damaged entry."""

    def __init__(self, tensor: str, message: str):
        super().__init__(message)
        self.tensor = tensor
