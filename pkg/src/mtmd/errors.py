"""Exception hierarchy. The CLI maps these onto exit codes."""


class MtmdError(Exception):
    exit_code = 1


class ConfigurationError(MtmdError):
    """Shape mismatches, bad config keys, schema mismatches."""

    exit_code = 3


class RoutingError(ConfigurationError):
    """An example was sent to a domain expert that does not own it."""


class DataError(MtmdError):
    """Malformed or out-of-range data."""

    exit_code = 2


class FormatError(DataError):
    """Bad magic, bad version, truncated or malformed file."""
