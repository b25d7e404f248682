"""Exception types shared across the package."""


class CelestialError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CelestialError):
    """An argument, configuration, or data structure violates a contract."""


class ManifestParseError(ValidationError):
    """A manifest file is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NotFoundError(CelestialError):
    """A requested id does not exist."""


class DecodeError(CelestialError):
    """An image file could not be decoded."""


class DomainError(CelestialError):
    """An input is outside the mathematical domain of an operation."""


class DegenerateBatchError(CelestialError):
    """A contrastive batch is too small to contain negatives."""


class TrainingError(CelestialError):
    """Training aborted (e.g. non-finite loss)."""


class LabelAccessError(CelestialError):
    """A label was read in a context that must stay label-blind."""


class MissingHeadError(CelestialError):
    """The model does not carry the head required for this operation."""


class CheckpointError(CelestialError):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    """The file is not a recognizable checkpoint."""


class UnsupportedVersionError(CheckpointError):
    """The checkpoint format version is not supported by this reader."""


class IntegrityError(CheckpointError):
    """The checkpoint is truncated or corrupted (checksum mismatch)."""
