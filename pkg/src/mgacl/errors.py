"""Exception hierarchy shared across the package."""


class MGACLError(Exception):
    """Base class for all package errors."""


class ConfigError(MGACLError, ValueError):
    """Invalid hyperparameter or option value."""


class ShapeError(MGACLError, ValueError):
    pass


class NumericError(MGACLError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ParseError(MGACLError, ValueError):
    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class AlignmentError(MGACLError, ValueError):
    """Item to entity alignment is inconsistent."""


class NotFoundError(MGACLError, KeyError):
    pass


class ColdStartError(MGACLError):
    """No candidate triples exist to sample from."""


class UndefinedMetricError(MGACLError, ValueError):
    pass
