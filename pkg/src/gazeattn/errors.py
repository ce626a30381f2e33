"""Exception hierarchy shared by all gazeattn modules."""


class GazeAttnError(Exception):
    """Base class for every error raised by this package."""


class InvalidImage(GazeAttnError, ValueError):
    pass


class NoFace(GazeAttnError):
    """The face detector found nothing in the image."""


class FactorOutOfRange(GazeAttnError, ValueError):
    pass


class ParseError(GazeAttnError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ParseError):
    def __init__(self, field: str, line: int | None = None, detail: str = "missing field"):
        self.field = field
        super().__init__(f"{detail} {field!r}", line)


class EmptyManifest(GazeAttnError):
    pass


class UnknownSubject(GazeAttnError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class TooFewSubjects(GazeAttnError):
    pass


class FrameReadError(GazeAttnError):
    def __init__(self, index: int, source: str = ""):
        self.index = index
        where = f" from {source}" if source else ""
        super().__init__(f"cannot read frame {index}{where}")


class InvalidSegment(GazeAttnError, ValueError):
    pass


class InvalidGeometry(GazeAttnError, ValueError):
    pass


class UnknownArchitecture(GazeAttnError, ValueError):
    pass


class EmptyDataset(GazeAttnError):
    pass


class DivergenceError(GazeAttnError, FloatingPointError):
    pass


class IncompatibleCheckpoint(GazeAttnError):
    pass


class ShapeError(GazeAttnError, ValueError):
    pass


class CorruptCheckpoint(GazeAttnError):
    pass


class VersionMismatch(GazeAttnError):
    pass


class LengthMismatch(GazeAttnError, ValueError):
    pass


class EmptyInput(GazeAttnError, ValueError):
    pass


class EmptyMatrix(GazeAttnError, ValueError):
    pass


class ConfigError(GazeAttnError):
    def __init__(self, key: str, message: str, source: str | None = None):
        self.key = key
        self.source = source
        where = f" (from {source})" if source else ""
        super().__init__(f"{key}: {message}{where}")


class UnknownCommand(GazeAttnError):
    pass
