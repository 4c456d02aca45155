"""Exception hierarchy shared across the package.

Each class maps onto a process exit code used by the command line tools.
"""


class VinoError(Exception):
    exit_code = 1


class ConfigError(VinoError, ValueError):
    exit_code = 2


class DataError(VinoError, ValueError):
    exit_code = 3


class InsufficientFramesError(DataError):
    pass


class AnnotationParseError(DataError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(VinoError, FloatingPointError):
    exit_code = 4


class NonFiniteLossError(NumericError):
    def __init__(self, message, dump_path=None):
        if dump_path is not None:
            message = f"{message}; offending batch written to {dump_path}"
        super().__init__(message)
        self.dump_path = dump_path
