"""Exception hierarchy shared by the library and the CLI."""


class CurveSigError(Exception):
    """Base class for all library errors."""


class DataError(CurveSigError, ValueError):
    """Malformed input data: invalid curves, bad files, version mismatches."""


class DegenerateError(CurveSigError, ArithmeticError):
    """A geometric configuration admits no unique answer (collinear points, zero area...)."""


class NumericalError(CurveSigError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""
