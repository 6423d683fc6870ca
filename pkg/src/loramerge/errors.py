"""Exception hierarchy shared by every loramerge module.

The CLI maps these onto exit codes: validation problems exit 2, container
format problems exit 3 and numeric failures exit 4.
"""


class LoraMergeError(Exception):
    exit_code = 1


class ValidationError(LoraMergeError, ValueError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class FormatError(LoraMergeError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(LoraMergeError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
