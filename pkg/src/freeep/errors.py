"""Exception hierarchy shared across the package."""


class FreeEPError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(FreeEPError, ValueError):
    pass


class InvalidParameter(FreeEPError, ValueError):
    pass


class NonFinite(FreeEPError, FloatingPointError):
    pass


class SingularMatrix(FreeEPError, ArithmeticError):
    pass


class ZeroMass(FreeEPError, ArithmeticError):
    pass


class NoBracket(FreeEPError, ArithmeticError):
    pass


class OutOfDomain(FreeEPError, ValueError):
    pass


class ZeroMean(OutOfDomain):
    pass


class PoleHit(FreeEPError, ArithmeticError):
    pass


class ZeroDiagonal(FreeEPError, ArithmeticError):
    pass


class DegenerateSpectrum(FreeEPError, ValueError):
    pass


class NotConverged(FreeEPError, RuntimeError):
    """Raised by fixed-point helpers that have no partial result to return.

    The EP solvers never raise this; they report ``converged=False`` in the
    returned summary instead so that the final state and trace survive.
    """


class NotPowerOfTwo(FreeEPError, ValueError):
    pass


class ConfigError(FreeEPError, ValueError):
    pass


class BenchConfigError(ConfigError):
    pass


class ParseError(FreeEPError, ValueError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message if line is None else f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class RaggedRows(ParseError):
    pass


class UnmappableLabel(ParseError):
    pass
