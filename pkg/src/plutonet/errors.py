"""Exception types shared across the package."""


class PlutoNetError(Exception):
    """Base class for all package errors."""


class ConfigError(PlutoNetError):
    """Invalid configuration value, file, or unknown config key."""


class ShapeError(PlutoNetError):
    """Tensor shape incompatible with an operation's contract."""


class DataError(PlutoNetError):
    """Corpus layout problem or an undecodable image/mask file."""


class CheckpointError(PlutoNetError):
    """Checkpoint missing, corrupt, or built from a different config."""


class NumericError(PlutoNetError):
    """Non-finite loss or other numeric failure during training."""
