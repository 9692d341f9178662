"""Collective communication with interchangeable transports."""

from __future__ import annotations

from .core import (
    Backend,
    CommTimer,
    Communicator,
    ReduceOp,
    WorldConfig,
)
from .rendezvous import RendezvousClient, RendezvousServer

__all__ = [
    "Backend",
    "CommTimer",
    "Communicator",
    "ReduceOp",
    "WorldConfig",
    "RendezvousClient",
    "RendezvousServer",
    "init",
]


def init(config: WorldConfig) -> Communicator:
    """Join the world described by ``config``; returns once every rank has."""
    if config.backend is Backend.INPROCESS:
        from .inprocess import init_inprocess

        return init_inprocess(config)
    from .tcp import init_tcp

    return init_tcp(config)
