"""Exception types shared across the package."""


class SplitlangError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(SplitlangError):
    """A caller-supplied value violates an operation's preconditions."""


class FileFormatError(SplitlangError):
    """A file does not conform to one of the on-disk formats."""


class ProtocolError(SplitlangError):
    """A wire-protocol frame is malformed or unexpected."""
