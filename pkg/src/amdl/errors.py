"""Exception types shared across the package."""


class AMDLError(Exception):
    """Base class for package errors."""


class DimensionError(AMDLError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(AMDLError, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class FormatError(AMDLError, ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ChecksumError(FormatError):
    """Stored CRC32 does not match the file contents."""
