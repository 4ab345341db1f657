"""Exception types shared across the toolkit."""


class TodQosError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TodQosError, ValueError):
    """A configuration value is missing or out of range.

    ``field`` names the offending entry so callers can report it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class SchemaError(TodQosError, ValueError):
    """Tabular data does not match the expected layout."""


class InsufficientHistoryError(TodQosError, ValueError):
    """A time series is too short for the requested model order."""


class DataError(TodQosError, ValueError):
    """Input data is empty, mismatched or otherwise unusable."""
