"""Exception hierarchy shared across the package."""

from pipevo.graph import CyclicGraph, GraphError, UnknownNode  # noqa: F401  re-exported


class PipevoError(Exception):
    pass


# operation registry
class UnknownOperation(PipevoError, KeyError):
    pass


class UnknownBackend(PipevoError, KeyError):
    pass


class ShapeMismatch(PipevoError, ValueError):
    pass


class DegenerateInput(PipevoError, ValueError):
    pass


class BlobFormatError(PipevoError, ValueError):
    """Serialized fitted operation is malformed or from another registry version."""


# evaluation
class EvaluationTimeout(PipevoError):
    """Raised cooperatively when an evaluation passes its deadline."""


class InvalidPipeline(PipevoError, ValueError):
    pass


class EmptyPopulation(PipevoError):
    pass


class InfrastructureUnavailable(PipevoError):
    pass


# node cache
class CorruptCacheFile(PipevoError):
    pass


# data
class ParseError(PipevoError, ValueError):
    def __init__(self, row: int, col: int | str, message: str = ""):
        self.row = row
        self.col = col
        super().__init__(f"row {row}, column {col}: {message}" if message else f"row {row}, column {col}")


class SingleClassDataset(PipevoError, ValueError):
    pass


class SingleClassLabels(PipevoError, ValueError):
    pass


class TooFewRows(PipevoError, ValueError):
    pass


# remote evaluation
class RemoteError(PipevoError):
    pass


class EndpointUnreachable(RemoteError):
    pass


class UnknownDataset(RemoteError, KeyError):
    pass


class UnknownTask(RemoteError, KeyError):
    pass


class NotCompleted(RemoteError):
    pass


class ChecksumMismatch(RemoteError):
    pass


class DecodeError(RemoteError):
    pass

