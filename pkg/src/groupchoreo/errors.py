"""Exceptions raised by the file readers."""


class FormatError(ValueError):
    """Base class for malformed input files."""


class MagicError(FormatError):
    def __init__(self, expected: bytes, actual: bytes):
        super().__init__(f"bad magic: expected {expected!r}, got {actual!r}")
        self.expected = expected
        self.actual = actual


class TruncatedError(FormatError):
    pass


class VersionError(FormatError):
    pass


class UnsupportedCodecError(FormatError):
    pass
