"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for every error raised by this package."""


# -- columnar table errors ----------------------------------------------------

class LengthMismatch(EngineError):
    pass


class DomainMismatch(EngineError):
    pass


class SchemaMismatch(EngineError):
    pass


class OutOfBounds(EngineError):
    pass


class CorruptPayload(EngineError):
    pass


class MalformedCsv(EngineError):
    pass


# -- communication errors -----------------------------------------------------

class CommError(EngineError):
    pass


class RendezvousTimeout(CommError):
    pass


class DuplicateRank(CommError):
    pass


class WorldSizeMismatch(CommError):
    pass


class InvalidRank(CommError):
    pass


class PeerFailure(CommError):
    pass


class Timeout(CommError):
    pass


class ProtocolMismatch(CommError):
    """Two ranks issued different collectives at the same sequence index."""


# -- executor errors ----------------------------------------------------------

class ExecutorError(EngineError):
    pass


class SpawnFailure(ExecutorError):
    pass


class ConstructionError(ExecutorError):
    """An executable's constructor raised on at least one rank."""

    def __init__(self, rank: int, message: str):
        super().__init__(f"rank {rank}: {message}")
        self.rank = rank


class NoExecutable(ExecutorError):
    pass


class ExecutorStopped(ExecutorError):
    pass


class WorkerError(ExecutorError):
    """A submitted function raised on at least one rank."""

    def __init__(self, rank: int, message: str):
        super().__init__(f"rank {rank}: {message}")
        self.rank = rank


class ResultTooLarge(ExecutorError):
    pass
