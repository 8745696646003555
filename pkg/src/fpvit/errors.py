"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class FpvitError(Exception):
    exit_code = 1


class ConfigError(FpvitError, ValueError):
    exit_code = 1


class ValidationError(FpvitError, ValueError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class FormatError(ValidationError):
    pass


class ProtocolError(ValidationError):
    pass


class EmptyResultError(ValidationError):
    pass


class GenerationError(FpvitError, RuntimeError):
    exit_code = 2


class NumericalError(FpvitError, ArithmeticError):
    exit_code = 3


class TrainingError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
