"""Exception hierarchy shared by all modules."""


class CtFusionError(Exception):
    """Base class for all package errors."""


class InvalidArgument(CtFusionError, ValueError):
    pass


class OutOfRange(CtFusionError, ValueError):
    """A time lies outside the span covered by a spline or window."""


class NearSingularLog(CtFusionError, ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class DegenerateGeometry(CtFusionError, ValueError):
    pass


class UnderConstrained(CtFusionError, ValueError):
    pass


class ConvergenceFailure(CtFusionError, RuntimeError):
    pass


class NumericalFailure(CtFusionError, RuntimeError):
    pass


class CheiralityError(CtFusionError, ValueError):
    """Point is not in front of the camera."""


class ParseError(CtFusionError, ValueError):
    """Malformed input file; message names the file and line."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")
