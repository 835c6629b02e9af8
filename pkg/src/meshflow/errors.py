"""Exception hierarchy.

Every exception carries a short ``category`` string; the command line
prints it as the machine-parsable part of a failure line.
"""


class MeshflowError(Exception):
    category = "error"


class ValidationError(MeshflowError, ValueError):
    category = "validation"


class ResourceLimitError(MeshflowError, MemoryError):
    category = "resource"


class IntegrationError(MeshflowError, ArithmeticError):
    """Non-finite state during ODE integration."""

    category = "integration"

    def __init__(self, message, step=None, vertex=None, stage=None):
        super().__init__(message)
        self.step = step
        self.vertex = vertex
        self.stage = stage


class ParseError(MeshflowError, ValueError):
    category = "parse"

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset


class UnsupportedFormatError(ParseError):
    category = "unsupported-format"


class BadMagicError(ParseError):
    category = "bad-magic"


class VersionMismatchError(ParseError):
    category = "version-mismatch"


class TruncatedFileError(ParseError):
    category = "truncated"


class ConfigError(MeshflowError, ValueError):
    category = "config"


class FitDivergenceError(MeshflowError, RuntimeError):
    """Raised when a stage's total loss exceeds the divergence bound."""

    category = "divergence"

    def __init__(self, message, history=None, stage=None):
        super().__init__(message)
        self.history = history if history is not None else []
        self.stage = stage
