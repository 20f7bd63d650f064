"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad input: out-of-range coordinate, malformed row, bad config."""


class NoCandidateError(LookupError):
    """A nearest-monitor query had no candidate monitors (e.g. empty county)."""


class ConvergenceError(RuntimeError):
    """An optimizer failed on every restart."""

    def __init__(self, message, best_deviance=None):
        super().__init__(message)
        self.best_deviance = best_deviance
