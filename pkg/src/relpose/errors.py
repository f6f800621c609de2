"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class RelPoseError(Exception):
    exit_code = 5


class InvariantError(RelPoseError):
    """An internal invariant was violated (bad transform, NaN descriptors, ...)."""

    exit_code = 5


class InputFormatError(RelPoseError, ValueError):
    exit_code = 2


class MalformedFileError(InputFormatError):
    def __init__(self, path, field, detail=""):
        self.path = str(path)
        self.field = field
        msg = f"{self.path}: malformed {field}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class DimensionMismatchError(MalformedFileError):
    pass


class ChecksumError(MalformedFileError):
    pass


class GeometryError(InputFormatError):
    """Base for invalid geometric inputs."""


class InvalidDepthError(GeometryError):
    pass


class OutOfBoundsError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


class BoxTooLargeError(GeometryError):
    pass


class ZeroVectorError(GeometryError):
    pass


class EmptyRenderError(GeometryError):
    pass


class EmptyModelError(GeometryError):
    pass


class EmptySupervisionError(InputFormatError):
    pass


class MatchingError(RelPoseError):
    exit_code = 3


class EmptyMaskError(MatchingError):
    pass


class NoMatchesError(MatchingError):
    pass


class InvalidMatchDepthError(MatchingError):
    """Every match landed on a pixel with missing depth in one of the views."""


class NoCovisiblePointsError(MatchingError):
    pass


class RegistrationError(RelPoseError):
    exit_code = 4


class DegenerateConfigurationError(RegistrationError):
    pass
