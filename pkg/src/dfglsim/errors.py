class SimError(Exception):
    """Base class for simulator errors."""


class ConfigurationError(SimError, ValueError):
    """Invalid parameters or configuration values."""


class ProtocolError(SimError, RuntimeError):
    """A worker broke the sampling/topology contract (e.g. talked to a non-neighbor)."""
