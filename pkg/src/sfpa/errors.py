"""Exception types shared across the toolkit."""


class SfpaError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(SfpaError, ValueError):
    pass


class DegenerateInput(SfpaError, ValueError):
    """Input carries no information to work with (e.g. an all-zero frame)."""


class OutOfView(SfpaError, ValueError):
    """A source lies outside the recorded field of view."""


class ShapeError(SfpaError, ValueError):
    pass


class FormatError(SfpaError, ValueError):
    """A binary or text file does not follow the expected layout."""


class ConfigError(SfpaError, ValueError):
    pass


class DivergenceError(SfpaError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None, losses=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.losses = dict(losses or {})
