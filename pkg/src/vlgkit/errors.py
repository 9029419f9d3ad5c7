"""Exception hierarchy shared across vlgkit."""


class VlgError(Exception):
    """Base class for all vlgkit errors."""


class StructureError(VlgError):
    """Malformed interleaved sequence (bad bracketing, bad span lengths)."""


class ConfigError(VlgError):
    """Invalid or inconsistent configuration."""


class ContractError(VlgError):
    """An operation was called with arguments violating its contract."""


class CorpusDecodeError(VlgError):
    """Corrupted, truncated, or version-mismatched corpus/checkpoint payload."""


class TrainingDivergedError(VlgError):
    """Loss became non-finite during training."""
