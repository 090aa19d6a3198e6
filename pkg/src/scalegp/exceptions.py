"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Inputs have inconsistent shapes (contract violation)."""


class ConfigError(ValueError):
    """An experiment configuration is invalid. Maps to exit code 1."""


class NumericalError(RuntimeError):
    """A linear-algebra step failed beyond recovery. Maps to exit code 2.

    ``jitter_trail`` lists the diagonal jitter values that were attempted
    before giving up (empty if jitter was never applicable).
    """

    def __init__(self, message, jitter_trail=()):
        super().__init__(message)
        self.jitter_trail = list(jitter_trail)
