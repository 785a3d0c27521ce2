"""Exception types shared across the package."""


class SpnError(Exception):
    """Base class for all package errors."""


class DimensionError(SpnError, ValueError):
    """A shape or size precondition was violated."""


class FormatError(SpnError, ValueError):
    """A file is malformed; the message carries the byte offset where known."""


class ContractError(SpnError, RuntimeError):
    """An internal contract was violated (boundary gates, caches, row sums)."""


class ConfigError(SpnError, ValueError):
    """Bad or unknown configuration key or value."""


class CheckpointError(SpnError, ValueError):
    """Checkpoint directory is missing, inconsistent, or shape-mismatched."""


class TrainingAborted(SpnError, RuntimeError):
    """Training stopped on a non-finite loss; the message carries gate statistics."""
