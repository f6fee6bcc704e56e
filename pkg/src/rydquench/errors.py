class CapacityError(ValueError):
    """Requested problem exceeds the supported size."""


class NumericalError(RuntimeError):
    """A numerical procedure failed to reach its tolerance."""


class ConfigError(ValueError):
    """Invalid run configuration."""
