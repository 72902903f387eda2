"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class ApeError(Exception):
    pass


class ConfigError(ApeError):
    """Invalid configuration, arguments out of range, incompatible resume."""


class DataError(ApeError):
    """Malformed shard files, violated data invariants, missing inputs."""


class DimensionError(ConfigError):
    """Shape mismatch between tensors; message names both shapes."""


class NumericError(ApeError):
    """Non-finite values where the numeric contract requires finiteness."""
