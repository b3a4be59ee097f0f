class EbrError(Exception):
    """Base class for all library errors."""


class InvalidArgument(EbrError, ValueError):
    pass


class DegenerateInput(EbrError, ValueError):
    """Raised for zero vectors and other inputs with no defined answer."""


class QuerySyntaxError(EbrError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.message = message
        self.offset = offset


class IndexStateError(EbrError):
    pass


class DuplicateDocument(IndexStateError):
    pass


class UnknownDocument(IndexStateError, KeyError):
    pass


class DimensionMismatch(InvalidArgument):
    pass


class UnknownEmbeddingKey(EbrError, KeyError):
    pass


class FormatError(EbrError):
    """On-disk file has the wrong magic or version."""


class ChecksumError(FormatError):
    pass


class TrainingDiverged(EbrError, FloatingPointError):
    pass


class QueryValidationError(InvalidArgument):
    def __init__(self, diagnostics):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = list(diagnostics)
