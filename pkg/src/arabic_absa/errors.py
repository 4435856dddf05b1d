"""Exception hierarchy shared across the pipeline."""


class AbsaError(Exception):
    """Base class for every error raised by this package."""


class CorpusParseError(AbsaError):
    """The input is not well-formed XML."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class SchemaError(AbsaError):
    """Well-formed XML that violates the expected corpus schema."""


class ConfigurationError(AbsaError):
    """An operation was invoked with inputs that cannot satisfy its contract."""


class EncodingError(AbsaError):
    """An instance cannot be turned into a model input."""


class LoadError(AbsaError):
    """A checkpoint or vocabulary could not be loaded."""


class NumericError(AbsaError):
    """Non-finite values appeared during a forward or backward pass."""


class ContractError(AbsaError):
    """A caller violated an operation's precondition."""
