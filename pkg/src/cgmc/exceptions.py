"""Exception types raised across the package."""


class CgmcError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CgmcError, ValueError):
    """Structural problem: mismatched dimensions, asymmetry, bad layout."""


class DomainError(CgmcError, ValueError):
    """A value is outside its legal domain (negative weight, k out of range, ...)."""


class NumericError(CgmcError, ArithmeticError):
    """A computation produced a non-finite intermediate."""


class ParseError(CgmcError, ValueError):
    """A text input failed to parse. Carries the 1-based line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


class CheckpointError(CgmcError, ValueError):
    """A checkpoint file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(CgmcError, ValueError):
    """A configuration file or value is invalid (unknown key, bad type, ...)."""


class TrainingDiverged(CgmcError, RuntimeError):
    """Training produced a non-finite loss. Carries epoch and iteration."""

    def __init__(self, message, epoch=None, iteration=None):
        self.epoch = epoch
        self.iteration = iteration
        if epoch is not None:
            message = f"{message} (epoch {epoch}, iteration {iteration})"
        super().__init__(message)
