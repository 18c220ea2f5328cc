"""Exception hierarchy shared across the package."""


class DDSAM2Error(Exception):
    pass


class ShapeError(DDSAM2Error, ValueError):
    pass


class ConfigError(DDSAM2Error, ValueError):
    pass


class PromptError(DDSAM2Error, ValueError):
    pass


class UsageError(DDSAM2Error, ValueError):
    pass


class NumericError(DDSAM2Error, ArithmeticError):
    pass


class ParseError(DDSAM2Error):
    """Malformed on-disk data. Carries the offending path and byte offset."""

    def __init__(self, path, offset, reason):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: byte {offset}: {reason}")
