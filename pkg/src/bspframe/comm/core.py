"""Communicator core: configuration, timing, and collective algorithms.

A communicator is a per-worker handle bound to one world. The collective
algorithms live here, written against two transport hooks (`_post` and the
shared mailbox), so backends only decide how bytes move between ranks.
Algorithms are deliberately naive (direct sends, root-relayed reductions):
the point is a modular, swappable transport, not collective optimization.

Every collective message carries its (sequence, opcode) pair. Receivers
match on sequence and verify the opcode, so two ranks issuing different
collectives at the same sequence index fail with ``ProtocolMismatch``
instead of silently corrupting each other.
"""

from __future__ import annotations

import enum
import itertools
import struct
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field

from ..errors import (
    CommError,
    InvalidRank,
    PeerFailure,
    ProtocolMismatch,
    Timeout,
)

__all__ = [
    "Backend",
    "WorldConfig",
    "ReduceOp",
    "CommTimer",
    "Envelope",
    "Mailbox",
    "Communicator",
    "OP_P2P",
    "OP_A2A",
    "OP_GATHER",
    "OP_ALLGATHER",
    "OP_BCAST",
    "OP_ALLREDUCE",
    "OP_BARRIER",
]

OP_P2P = 0
OP_A2A = 1
OP_GATHER = 2
OP_ALLGATHER = 3
OP_BCAST = 4
OP_ALLREDUCE = 5
OP_BARRIER = 6

_OP_NAMES = {
    OP_P2P: "p2p",
    OP_A2A: "all_to_all",
    OP_GATHER: "gather",
    OP_ALLGATHER: "allgather",
    OP_BCAST: "broadcast",
    OP_ALLREDUCE: "allreduce",
    OP_BARRIER: "barrier",
}

DEFAULT_TIMEOUT = 30.0

_init_counter = itertools.count(1)


class Backend(enum.Enum):
    INPROCESS = "inproc"
    TCP = "tcp"


class ReduceOp(enum.Enum):
    SUM = "sum"
    MIN = "min"
    MAX = "max"


@dataclass(frozen=True)
class WorldConfig:
    """Identity and transport settings for one worker joining a world."""

    world_size: int
    rank: int
    backend: Backend
    rendezvous: str | None = None  # "host:port", TCP backend only
    namespace: str = "default"
    timeout: float = DEFAULT_TIMEOUT
    bind_host: str = "127.0.0.1"

    def __post_init__(self):
        if self.world_size < 1:
            raise CommError(f"world_size must be >= 1, got {self.world_size}")
        if not 0 <= self.rank < self.world_size:
            raise InvalidRank(f"rank {self.rank} not in [0, {self.world_size})")


class CommTimer:
    """Wall-time accounting split into communication and computation.

    Scopes may nest in any combination; entering one pauses the other, so
    an instant is only ever charged to one category and comm + comp never
    exceeds the enclosing wall time.
    """

    def __init__(self):
        self.comm_seconds = 0.0
        self.comp_seconds = 0.0
        self._stack: list[list] = []  # [category, started_at]

    def _charge(self, category: str, elapsed: float) -> None:
        if category == "comm":
            self.comm_seconds += elapsed
        else:
            self.comp_seconds += elapsed

    @contextmanager
    def _timed(self, category: str):
        now = time.perf_counter()
        if self._stack:
            top = self._stack[-1]
            self._charge(top[0], now - top[1])
        self._stack.append([category, now])
        try:
            yield
        finally:
            now = time.perf_counter()
            top = self._stack.pop()
            self._charge(top[0], now - top[1])
            if self._stack:
                self._stack[-1][1] = now

    def communication(self):
        return self._timed("comm")

    def computation(self):
        return self._timed("comp")

    def snapshot(self) -> tuple[float, float]:
        return self.comm_seconds, self.comp_seconds


@dataclass(frozen=True)
class Envelope:
    """One transported message."""

    opcode: int
    seq: int
    src: int
    tag: int
    payload: bytes


class Mailbox:
    """Thread-safe store of received envelopes, matched by source and slot.

    P2P messages queue under (src, tag); collective messages under
    (src, seq). Per-slot queues preserve arrival order, which together with
    ordered transports gives FIFO delivery per (src, dest, tag).
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._slots: dict[tuple, deque[Envelope]] = {}
        self._dead: dict[int, Exception] = {}
        self._failure: Exception | None = None

    @staticmethod
    def _key(env: Envelope) -> tuple:
        if env.opcode == OP_P2P:
            return (env.src, "p2p", env.tag)
        return (env.src, "coll", env.seq)

    def put(self, env: Envelope) -> None:
        with self._cond:
            self._slots.setdefault(self._key(env), deque()).append(env)
            self._cond.notify_all()

    def fail_src(self, src: int, exc: Exception) -> None:
        """Mark one peer dead; queued messages stay deliverable."""
        with self._cond:
            self._dead[src] = exc
            self._cond.notify_all()

    def fail_all(self, exc: Exception) -> None:
        with self._cond:
            self._failure = exc
            self._cond.notify_all()

    def take(self, src: int, *, tag: int | None = None, seq: int | None = None,
             timeout: float = DEFAULT_TIMEOUT) -> Envelope:
        key = (src, "p2p", tag) if seq is None else (src, "coll", seq)
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                q = self._slots.get(key)
                if q:
                    env = q.popleft()
                    if not q:
                        del self._slots[key]
                    return env
                if self._failure is not None:
                    raise PeerFailure(str(self._failure))
                if src in self._dead:
                    raise PeerFailure(str(self._dead[src]))
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"no message from rank {src} within {timeout}s")
                self._cond.wait(remaining)


_I64_MIN, _I64_MAX = -(2**63), 2**63 - 1


class Communicator(ABC):
    """Per-worker collective communication handle."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.rank = config.rank
        self.world_size = config.world_size
        self.timeout = config.timeout
        self.timer = CommTimer()
        self.init_stamp = next(_init_counter)
        self._mailbox = Mailbox()
        self._seq = 0
        self.closed = False

    # -- transport hooks --------------------------------------------------

    @abstractmethod
    def _post(self, dest: int, env: Envelope) -> None:
        """Hand one envelope to the transport; must not block indefinitely."""

    @abstractmethod
    def close(self) -> None:
        """Leave the world and release transport resources; idempotent."""

    # -- helpers -----------------------------------------------------------

    def _check_peer(self, rank: int) -> None:
        if not 0 <= rank < self.world_size:
            raise InvalidRank(f"rank {rank} not in [0, {self.world_size})")

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _take(self, src: int, seq: int, opcode: int, timeout: float | None = None) -> bytes:
        env = self._mailbox.take(src, seq=seq, timeout=self.timeout if timeout is None else timeout)
        if env.opcode != opcode:
            raise ProtocolMismatch(
                f"sequence {seq}: expected {_OP_NAMES[opcode]} from rank {src}, "
                f"got {_OP_NAMES.get(env.opcode, env.opcode)}"
            )
        return env.payload

    def _others(self):
        return (r for r in range(self.world_size) if r != self.rank)

    # -- point to point -----------------------------------------------------

    def send(self, dest: int, tag: int, payload: bytes) -> None:
        """Send bytes to ``dest``; FIFO per (source, dest, tag)."""
        with self.timer.communication():
            self._check_peer(dest)
            if dest == self.rank:
                raise InvalidRank("send to self is not allowed")
            self._post(dest, Envelope(OP_P2P, 0, self.rank, tag, bytes(payload)))

    def recv(self, src: int, tag: int, timeout: float | None = None) -> bytes:
        with self.timer.communication():
            self._check_peer(src)
            if src == self.rank:
                raise InvalidRank("recv from self is not allowed")
            env = self._mailbox.take(src, tag=tag,
                                     timeout=self.timeout if timeout is None else timeout)
            return env.payload

    # -- collectives --------------------------------------------------------

    def barrier(self, timeout: float | None = None) -> None:
        """No rank returns before every rank has entered."""
        with self.timer.communication():
            seq = self._next_seq()
            if self.world_size == 1:
                return
            if self.rank == 0:
                for s in self._others():
                    self._take(s, seq, OP_BARRIER, timeout)
                for d in self._others():
                    self._post(d, Envelope(OP_BARRIER, seq, 0, 0, b""))
            else:
                self._post(0, Envelope(OP_BARRIER, seq, 0 + self.rank, 0, b""))
                self._take(0, seq, OP_BARRIER, timeout)

    def all_to_all(self, outgoing: list[bytes]) -> list[bytes]:
        """Exchange one payload with every rank; result[i] came from rank i."""
        with self.timer.communication():
            if len(outgoing) != self.world_size:
                raise CommError(
                    f"outgoing has {len(outgoing)} entries, world size is {self.world_size}"
                )
            seq = self._next_seq()
            for d in self._others():
                self._post(d, Envelope(OP_A2A, seq, self.rank, 0, bytes(outgoing[d])))
            results: list[bytes] = [b""] * self.world_size
            results[self.rank] = bytes(outgoing[self.rank])
            for s in self._others():
                results[s] = self._take(s, seq, OP_A2A)
            return results

    def gather(self, payload: bytes, root: int) -> list[bytes]:
        """Root receives all payloads in rank order; other ranks get []."""
        with self.timer.communication():
            self._check_peer(root)
            seq = self._next_seq()
            if self.rank != root:
                self._post(root, Envelope(OP_GATHER, seq, self.rank, 0, bytes(payload)))
                return []
            results: list[bytes] = [b""] * self.world_size
            results[self.rank] = bytes(payload)
            for s in self._others():
                results[s] = self._take(s, seq, OP_GATHER)
            return results

    def allgather(self, payload: bytes) -> list[bytes]:
        """Every rank receives every payload, in rank order."""
        with self.timer.communication():
            seq = self._next_seq()
            for d in self._others():
                self._post(d, Envelope(OP_ALLGATHER, seq, self.rank, 0, bytes(payload)))
            results: list[bytes] = [b""] * self.world_size
            results[self.rank] = bytes(payload)
            for s in self._others():
                results[s] = self._take(s, seq, OP_ALLGATHER)
            return results

    def broadcast(self, payload: bytes | None, root: int) -> bytes:
        """Every rank returns the root's payload."""
        with self.timer.communication():
            self._check_peer(root)
            seq = self._next_seq()
            if self.rank == root:
                data = bytes(payload if payload is not None else b"")
                for d in self._others():
                    self._post(d, Envelope(OP_BCAST, seq, self.rank, 0, data))
                return data
            return self._take(root, seq, OP_BCAST)

    def allreduce_i64(self, value: int, op: ReduceOp) -> int:
        """Fold one signed 64-bit value per rank with ``op``; same result everywhere."""
        with self.timer.communication():
            value = int(value)
            if not _I64_MIN <= value <= _I64_MAX:
                raise CommError(f"{value} out of int64 range")
            seq = self._next_seq()
            mine = struct.pack("<q", value)
            if self.rank == 0:
                values = [value]
                for s in self._others():
                    values.append(struct.unpack("<q", self._take(s, seq, OP_ALLREDUCE))[0])
                if op is ReduceOp.SUM:
                    result = sum(values)
                    if not _I64_MIN <= result <= _I64_MAX:
                        raise CommError("allreduce sum overflowed int64")
                elif op is ReduceOp.MIN:
                    result = min(values)
                else:
                    result = max(values)
                packed = struct.pack("<q", result)
                for d in self._others():
                    self._post(d, Envelope(OP_ALLREDUCE, seq, self.rank, 0, packed))
                return result
            self._post(0, Envelope(OP_ALLREDUCE, seq, self.rank, 0, mine))
            return struct.unpack("<q", self._take(0, seq, OP_ALLREDUCE))[0]
