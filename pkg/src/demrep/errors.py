"""Exception taxonomy shared across the workbench.

CLI exit-code mapping: ConfigError -> 2, DataError (and subclasses) -> 3,
DivergenceError -> 4.
"""


class DemrepError(Exception):
    """Base class for all workbench errors."""


class ConfigError(DemrepError):
    """Invalid configuration value or infeasible setting."""


class DataError(DemrepError):
    """Malformed, missing, or unusable input data."""


class SchemaError(DataError):
    """Input file does not match a documented layout."""


class ContractError(DemrepError):
    """An operation was called outside its documented preconditions."""


class TransportError(DataError):
    """Remote embedding service unreachable and fallback disabled."""


class DivergenceError(DemrepError):
    """Numeric divergence (non-finite loss or exhausted resampling)."""
