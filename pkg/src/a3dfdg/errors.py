"""Exception types shared across the package.

Invalid arguments raise the builtin :class:`ValueError`; the classes here cover
the remaining failure kinds that callers may want to catch separately.
"""


class FormatError(ValueError):
    """A binary payload (volume, bank, checkpoint) is malformed or truncated."""


class NotFoundError(LookupError):
    """A requested item (style, slice-score provenance, file) does not exist."""


class ConfigError(ValueError):
    """A run configuration is inconsistent or names an unknown key."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for its inputs (e.g. ASD with an empty mask)."""
