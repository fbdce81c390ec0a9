"""Exception types shared across the package."""


class PriorZeroError(Exception):
    """Base class for all package errors."""


class ConfigError(PriorZeroError):
    """Invalid or inconsistent configuration (unknown env, bad key, shape mismatch)."""


class InvalidActionError(PriorZeroError):
    """An action was submitted that is not in the current observation's valid set."""


class OracleError(PriorZeroError):
    """Action scoring produced no usable result (e.g. all scores non-finite)."""


class TrainingError(PriorZeroError):
    """Non-finite loss or gradient during an update."""
