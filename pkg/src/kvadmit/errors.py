class ConfigError(ValueError):
    """Invalid scenario or component configuration."""


class HorizonExceeded(RuntimeError):
    """The simulated clock passed the configured horizon."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
