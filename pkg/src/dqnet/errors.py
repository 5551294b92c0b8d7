class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates a size or divisibility constraint."""


class DegenerateBatchError(ValueError):
    """Batch statistics are undefined (a single element per channel)."""


class DomainError(ValueError):
    """An input lies outside the domain of the function."""
