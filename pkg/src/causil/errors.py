"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`CausilError`
so callers (and the CLI) can separate estimation failures from bugs.
"""


class CausilError(Exception):
    """Base class for all package errors."""


class EmptyInput(CausilError, ValueError):
    pass


class DomainError(CausilError, ValueError):
    """Input lies outside the declared domain (bad code, invalid distribution)."""


class ShapeError(CausilError, ValueError):
    pass


class InsufficientSupport(CausilError):
    """A conditioning cell has no observations."""

    def __init__(self, message, block=None, state=None):
        super().__init__(message)
        self.block = block
        self.state = state


class RankDeficient(CausilError, ArithmeticError):
    """A proxy matrix is (numerically) singular."""

    def __init__(self, message, state=None, min_singular_value=None):
        super().__init__(message)
        self.state = state
        self.min_singular_value = min_singular_value


class DegenerateSample(CausilError, ValueError):
    pass


class NumericError(CausilError, ArithmeticError):
    pass


class SingularError(CausilError, ArithmeticError):
    pass


class ParseError(CausilError, ValueError):
    def __init__(self, message, file=None, line=None):
        super().__init__(message)
        self.file = file
        self.line = line


class SchemaError(CausilError, ValueError):
    pass


class DegenerateCut(CausilError, ValueError):
    pass


class EmptySelection(CausilError, ValueError):
    pass


class IoError(CausilError, OSError):
    pass
