"""Exception hierarchy shared by all segfuse modules."""


class SegfuseError(Exception):
    """Base class for every error raised by this package."""


class ParseError(SegfuseError):
    """Raised when on-disk data cannot be decoded.

    ``position`` is a byte offset for binary formats and a 1-based line
    number for text formats.
    """

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)
        self.position = position


class TruncatedFile(ParseError):
    pass


class NonFiniteValue(ParseError):
    pass


class MalformedLine(ParseError):
    pass


class MissingKey(ParseError):
    pass


class MalformedMatrix(ParseError):
    pass


class MissingScore(SegfuseError):
    pass


class LengthMismatch(SegfuseError):
    pass


class NonFiniteScore(SegfuseError):
    pass


class InvalidConfig(SegfuseError):
    pass


class CoordOutOfRange(SegfuseError):
    pass


class Overflow(SegfuseError):
    pass


class DegenerateAnchor(SegfuseError):
    pass


class DomainError(SegfuseError):
    pass


class NoGroundTruth(SegfuseError):
    pass


class FrameMismatch(SegfuseError):
    pass


class MissingCalibration(SegfuseError):
    pass
