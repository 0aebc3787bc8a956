"""Exception types shared across the pipeline.

The CLI maps each class to an exit code: ConfigError -> 2, DataError -> 3,
InvariantError -> 4.
"""


class ConfigError(ValueError):
    """Bad configuration: missing columns, malformed region maps, invalid params."""


class DataError(ValueError):
    """Input data cannot support the requested computation."""


class InvariantError(AssertionError):
    """An internal consistency check failed; indicates a bug, not bad input."""
