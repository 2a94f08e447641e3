"""Exception types raised across the package."""


class ConvServeError(Exception):
    pass


class ConfigError(ConvServeError, ValueError):
    pass


class InsufficientDeviceMemory(ConvServeError):
    pass


class InsufficientHostMemory(ConvServeError):
    pass


class UnknownConversation(ConvServeError, KeyError):
    pass


class InvalidChunkState(ConvServeError):
    """A chunk is not in the tier an operation requires."""


class EmptyProfile(ConvServeError, ValueError):
    pass


class NotEnoughEvictable(ConvServeError):
    pass


class TraceMissing(ConvServeError):
    pass


class CannotSuspendAll(ConvServeError):
    pass


class Deadlock(ConvServeError):
    pass


class EmptyTrace(ConvServeError, ValueError):
    pass


class ParseError(ConvServeError, ValueError):
    def __init__(self, line_no: int, message: str = "") -> None:
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")
