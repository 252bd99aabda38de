"""Exception types raised across the package."""


class LoraExtractError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(LoraExtractError, ValueError):
    pass


class ConvergenceFailure(LoraExtractError, RuntimeError):
    """An SVD kernel hit its iteration cap.

    ``layer`` is filled in by callers that know which layer was being
    decomposed.
    """

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"{layer}: {message}"
        super().__init__(message)


class NonFiniteError(LoraExtractError, ValueError):
    """A matrix or tensor contains NaN or Inf entries."""


# checkpoint container
class CheckpointError(LoraExtractError, ValueError):
    pass


class MalformedHeader(CheckpointError):
    pass


class SpanOutOfBounds(CheckpointError):
    pass


class DuplicateName(CheckpointError):
    pass


class NotTwoDimensional(CheckpointError):
    pass


# energy analysis
class InvalidThreshold(LoraExtractError, ValueError):
    pass


# adapter directory
class AdapterError(LoraExtractError, ValueError):
    pass


class EmptyAdapter(AdapterError):
    pass


class InconsistentRank(AdapterError):
    pass


class MissingCounterpart(AdapterError):
    pass


class DimensionMismatch(AdapterError):
    pass


class MalformedConfig(AdapterError):
    pass
