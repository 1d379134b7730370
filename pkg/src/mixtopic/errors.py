"""Exception hierarchy shared by all modules."""


class MixTopicError(Exception):
    """Base class for all package errors."""


class ParseError(MixTopicError):
    """A corpus or meta file line could not be read."""

    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)


class SchemaError(MixTopicError):
    """The type/lab schema is inconsistent."""


class ValidationError(MixTopicError):
    """Input values fall outside their allowed range."""


class NumericalError(MixTopicError):
    """A non-finite or degenerate quantity appeared during inference."""


class ModelFormatError(MixTopicError):
    """A saved model container could not be loaded."""
