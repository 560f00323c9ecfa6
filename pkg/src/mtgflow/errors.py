"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""
