class SegdescError(Exception):
    """Base class for errors raised by segdesc."""


class PreprocessingError(SegdescError, ValueError):
    pass


class ShapeError(SegdescError, ValueError):
    pass


class DataFormatError(SegdescError, ValueError):
    """Malformed dataset, checkpoint or config file."""

    def __init__(self, message, *, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class NotTrainedError(SegdescError, RuntimeError):
    pass


class NumericError(SegdescError, ArithmeticError):
    """Training diverged or a numeric check exceeded its tolerance."""
