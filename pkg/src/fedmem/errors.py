class FedmemError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FedmemError, ValueError):
    """Invalid or inconsistent configuration, detected before any work runs."""


class InputError(FedmemError, ValueError):
    """Malformed input data (corpus, manifest, checkpoint...)."""
