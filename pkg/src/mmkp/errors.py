"""Exception hierarchy shared across the package."""


class MKPError(Exception):
    """Base class; the CLI maps it to exit status 1."""


class ConfigError(MKPError, ValueError):
    pass


class EmptyCorpus(MKPError, ValueError):
    pass


class NoTarget(MKPError, ValueError):
    pass


class ParseError(MKPError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(MKPError, ValueError):
    pass


class NumericError(MKPError, ArithmeticError):
    pass


class EmptyInput(MKPError, ValueError):
    pass


class StageOrderError(MKPError, RuntimeError):
    pass
