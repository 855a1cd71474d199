"""Exception hierarchy shared by every refinery module."""


class RefineryError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RefineryError, ValueError):
    """An operand has the wrong rank, size or channel count."""

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class LabelError(RefineryError, ValueError):
    """A mask contains a class index outside the valid range."""


class FormatError(RefineryError, ValueError):
    """A file or blob does not follow its binary/text format."""


class ConfigError(RefineryError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class CheckpointMismatch(RefineryError, ValueError):
    """Checkpoint entries do not match the model they are loaded into."""

    def __init__(self, message, entries=()):
        super().__init__(message)
        self.entries = list(entries)


class TrainingDiverged(RefineryError, RuntimeError):
    """Training produced a non-finite loss."""
