"""Exception hierarchy shared by all modules."""


class VolAlignError(Exception):
    """Base class for every error raised by this package."""


class ZeroVector(VolAlignError, ValueError):
    pass


class DimensionMismatch(VolAlignError, ValueError):
    pass


class NonSymmetric(VolAlignError, ValueError):
    pass


class DegenerateConfiguration(VolAlignError, ArithmeticError):
    """The kernel Gram matrix is singular, so the volume has no usable gradient."""


class NonFiniteFunction(VolAlignError, ArithmeticError):
    pass


class ShapeMismatch(VolAlignError, ValueError):
    pass


class EmptyPrototypes(VolAlignError, ValueError):
    pass


class IndexOutOfRange(VolAlignError, IndexError):
    pass


class EmptyClass(VolAlignError, ValueError):
    pass


class CountMismatch(VolAlignError, ValueError):
    pass


class KindMismatch(VolAlignError, ValueError):
    pass


class EmptyValidation(VolAlignError, ValueError):
    pass


class InsufficientCandidates(VolAlignError, ValueError):
    pass


class SeparationUnsatisfiable(VolAlignError, RuntimeError):
    pass


class FormatError(VolAlignError, ValueError):
    pass


class EmptyClassName(VolAlignError, ValueError):
    pass


class ParseError(VolAlignError, ValueError):
    """Raised when an LLM reply cannot be split into reasoning stages."""


class MissingStage(ParseError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing stage tags: " + ", ".join(self.missing))


class MalformedTags(ParseError):
    pass


class NetworkError(VolAlignError, ConnectionError):
    pass


class HttpStatusError(VolAlignError):
    def __init__(self, code, body=""):
        self.code = code
        self.body = body
        super().__init__(f"endpoint returned HTTP {code}")


class RequestTimeout(VolAlignError, TimeoutError):
    pass
