"""In-process transport: one world per namespace inside a host process.

Ranks are threads sharing a registry of mailboxes, so a "send" is a direct
append to the peer's queue. This backend drives tests and single-node runs
and doubles as the reference setting for backend interchangeability.
"""

from __future__ import annotations

import threading
import time

from ..errors import DuplicateRank, PeerFailure, RendezvousTimeout, WorldSizeMismatch
from .core import Communicator, Envelope, WorldConfig

__all__ = ["init_inprocess", "InProcessCommunicator", "world_creations"]

_LOCK = threading.Lock()
_WORLDS: dict[str, "_World"] = {}
_CREATIONS = 0  # worlds ever formed; lets tests prove communicator reuse


class _World:
    def __init__(self, namespace: str, world_size: int):
        self.namespace = namespace
        self.world_size = world_size
        self.cond = threading.Condition()
        self.members: dict[int, InProcessCommunicator] = {}
        self.formed = False
        self.broken: Exception | None = None


def world_creations() -> int:
    return _CREATIONS


class InProcessCommunicator(Communicator):
    def __init__(self, config: WorldConfig, world: _World):
        super().__init__(config)
        self._world = world

    def _post(self, dest: int, env: Envelope) -> None:
        if dest == self.rank:
            self._mailbox.put(env)
            return
        with self._world.cond:
            if self._world.broken is not None:
                raise PeerFailure(str(self._world.broken))
            peer = self._world.members.get(dest)
        if peer is None or peer.closed:
            raise PeerFailure(f"rank {dest} has left world {self._world.namespace!r}")
        peer._mailbox.put(env)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        world = self._world
        with world.cond:
            world.members.pop(self.rank, None)
            remaining = list(world.members.values())
            empty = not world.members
            world.cond.notify_all()
        for peer in remaining:
            peer._mailbox.fail_src(self.rank, PeerFailure(f"rank {self.rank} left the world"))
        if empty:
            with _LOCK:
                if _WORLDS.get(world.namespace) is world:
                    del _WORLDS[world.namespace]

    def abort(self) -> None:
        """Simulate an abnormal death: every live rank sees PeerFailure."""
        world = self._world
        exc = PeerFailure(f"rank {self.rank} aborted")
        with world.cond:
            world.broken = exc
            peers = list(world.members.values())
            world.cond.notify_all()
        for peer in peers:
            peer._mailbox.fail_all(exc)
        self.close()


def init_inprocess(config: WorldConfig) -> InProcessCommunicator:
    """Join (or create) the in-process world for this namespace.

    Returns once all ``world_size`` ranks have registered, so init doubles
    as a barrier.
    """
    global _CREATIONS
    ns = config.namespace
    with _LOCK:
        world = _WORLDS.get(ns)
        if world is None:
            world = _World(ns, config.world_size)
            _WORLDS[ns] = world
    deadline = time.monotonic() + config.timeout
    with world.cond:
        if world.world_size != config.world_size:
            raise WorldSizeMismatch(
                f"world {ns!r} has size {world.world_size}, not {config.world_size}"
            )
        if world.formed or config.rank in world.members:
            raise DuplicateRank(f"rank {config.rank} already registered in world {ns!r}")
        comm = InProcessCommunicator(config, world)
        world.members[config.rank] = comm
        world.cond.notify_all()
        while len(world.members) < world.world_size:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                world.members.pop(config.rank, None)
                world.cond.notify_all()
                raise RendezvousTimeout(
                    f"world {ns!r}: {len(world.members)} of {world.world_size} "
                    f"ranks joined within {config.timeout}s"
                )
            world.cond.wait(remaining)
        if not world.formed:
            world.formed = True
            _CREATIONS += 1
    return comm
