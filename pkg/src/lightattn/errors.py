"""Exception hierarchy shared by every module."""


class LightAttnError(Exception):
    """Base class for all library errors."""


class DimensionError(LightAttnError, ValueError):
    """Shapes or lengths that do not agree."""


class DomainError(LightAttnError, ValueError):
    """Values outside the admissible domain (e.g. NaN or Inf input)."""


class ParameterError(LightAttnError, ValueError):
    """Invalid hyper-parameter such as a negative stride or even window."""


class DegenerateRowError(LightAttnError, ValueError):
    """A softmax row with every entry masked."""


class ContractError(LightAttnError, RuntimeError):
    """A caller broke an operation's precondition."""


class ConfigurationError(LightAttnError, ValueError):
    """Inconsistent or unknown configuration."""


class DataError(LightAttnError, ValueError):
    """Bad labels, duplicate ids, missing files."""


class FormatError(DataError):
    """Malformed feature or checkpoint file.

    Carries the offending line (text formats) or byte offset (binary formats)
    when one is known.
    """

    def __init__(self, message, *, line=None, offset=None):
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (offset {offset})"
        super().__init__(message + where)
        self.line = line
        self.offset = offset


class AliasingWarning(UserWarning):
    """Sequence longer than the position period; positions may repeat."""


class DivergenceError(LightAttnError, ArithmeticError):
    """Training produced a non-finite loss."""
