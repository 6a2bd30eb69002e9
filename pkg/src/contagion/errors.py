class ConfigError(ValueError):
    """Invalid parameter set; ``path`` names the offending field (``hawkes.alpha[1]``)."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)

    def under(self, prefix: str) -> "ConfigError":
        return ConfigError(f"{prefix}.{self.path}" if self.path else prefix, self.message)


class NumericalError(RuntimeError):
    """A solver or integrator failed; the message carries diagnostics."""
