class ConfigError(ValueError):
    """Invalid configuration: a bound or precondition on user-supplied settings."""


class ShapeError(ValueError):
    """Array shapes or dimensions do not line up."""


class DataFormatError(ValueError):
    """A persisted file is malformed."""

    def __init__(self, message, record_id=None):
        super().__init__(message if record_id is None else f"{record_id}: {message}")
        self.record_id = record_id


class NotFittedError(RuntimeError):
    pass
