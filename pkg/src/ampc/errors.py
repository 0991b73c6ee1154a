"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes (config 2, budget 3, numeric 4).
"""


class AmpcError(Exception):
    """Base class for all toolkit errors."""


class ModelError(AmpcError):
    """Malformed model, cost, or dimension mismatch."""


class ConfigError(AmpcError):
    """Invalid or inconsistent run configuration."""


class BudgetError(AmpcError):
    """An enumeration or node budget would be (or was) exceeded."""


class NumericError(AmpcError):
    """Non-finite values produced by an unstable or ill-scaled computation."""
