from __future__ import annotations

import numpy as np
import pytest

from bspframe.comm import RendezvousServer
from bspframe.store import host_store


@pytest.fixture(autouse=True)
def _clean_host_store():
    host_store().clear()
    yield
    host_store().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def rendezvous_server():
    server = RendezvousServer().start()
    yield server
    server.stop()
