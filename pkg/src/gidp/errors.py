"""Exception types shared across the package."""


class GidpError(Exception):
    """Base class for errors raised by this package."""


class FormatError(GidpError):
    """A file does not conform to one of the on-disk formats."""


class LayoutMismatchError(GidpError):
    """A checkpoint's parameter layout differs from the expected one."""


class ConfigError(GidpError):
    """Invalid configuration key, type, or constraint."""


class StageError(GidpError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
