"""Per-worker execution context handed to submitted functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .comm import Communicator, CommTimer


@dataclass
class ExecEnv:
    """What a user function sees on each worker.

    Valid only inside a submitted function's execution; the communicator
    and store outlive individual submissions (worker state persists).
    """

    rank: int
    world_size: int
    comm: Communicator
    timer: CommTimer
    store: Any
    seed: int
