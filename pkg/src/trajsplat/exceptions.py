"""Exception hierarchy.

Input problems derive from :class:`InputError` (also a ``ValueError``) and
numerical failures from :class:`NumericalError`; the CLI maps the two
families onto distinct exit codes.
"""


class TrajsplatError(Exception):
    """Base class for all toolkit errors."""


class InputError(TrajsplatError, ValueError):
    """Malformed or out-of-contract input."""


class NumericalError(TrajsplatError, ArithmeticError):
    """A computation hit a degenerate or unstable configuration."""


class EmptyTrajectory(InputError):
    pass


class InvalidFrameCount(InputError):
    pass


class PixelOutOfBounds(InputError):
    pass


class StepOutOfRange(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class LayoutMismatch(InputError):
    pass


class LengthMismatch(InputError):
    pass


class ImageTooSmall(InputError):
    pass


class EpipoleQuery(InputError):
    """The queried pixel is the epipole, so it has no epipolar line."""


class InsufficientOverlap(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class AmbiguousGeodesic(NumericalError):
    """Rotations 180 degrees apart have no unique shortest arc."""


class DegenerateBaseline(NumericalError):
    pass


class DegenerateDepth(NumericalError):
    pass


class StaticTrajectory(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass
