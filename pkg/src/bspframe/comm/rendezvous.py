"""Rendezvous bootstrap service: a tiny line-based TCP key-value store.

Workers discover each other by publishing ``<namespace>/rank/<r>`` keys and
polling until the whole world is present. The same store carries the data
store's spill manifests for the TCP backend. Protocol, one request per
line: ``PUT <key> <value>`` answered ``OK``, and ``GET <key>`` answered
``OK <value>`` or ``MISSING``. Keys and values are URL-quoted on the wire
so they never contain whitespace. PUT overwrites (last write wins);
claim-style keys are guarded by a GET before the PUT.
"""

from __future__ import annotations

import socket
import threading
import time
from urllib.parse import quote, unquote

from ..errors import CommError, RendezvousTimeout

__all__ = ["RendezvousServer", "RendezvousClient", "parse_address"]


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host:
        raise CommError(f"bad rendezvous address {addr!r}, expected host:port")
    return host, int(port)


class RendezvousServer:
    """Serves PUT/GET over TCP; one thread per connection, connections may persist."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(128)
        self.host, self.port = self._sock.getsockname()[:2]
        self._store: dict[str, str] = {}
        self._lock = threading.Lock()
        self._stopping = False
        self._accept_thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "RendezvousServer":
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="rendezvous-accept", daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rwb") as f:
            while True:
                line = f.readline()
                if not line:
                    return
                parts = line.decode("ascii", "replace").split()
                reply = "MISSING"
                if len(parts) == 3 and parts[0] == "PUT":
                    with self._lock:
                        self._store[parts[1]] = parts[2]
                    reply = "OK"
                elif len(parts) == 2 and parts[0] == "GET":
                    with self._lock:
                        value = self._store.get(parts[1])
                    if value is not None:
                        reply = f"OK {value}"
                f.write((reply + "\n").encode("ascii"))
                f.flush()

    def stop(self) -> None:
        self._stopping = True
        try:
            self._sock.close()
        except OSError:
            pass


class RendezvousClient:
    """Blocking client over one persistent connection (reconnects on error)."""

    def __init__(self, address: str, timeout: float = 30.0):
        self.host, self.port = parse_address(address)
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._file = None
        self._lock = threading.Lock()

    def _connect(self):
        deadline = time.monotonic() + self.timeout
        last: Exception | None = None
        while time.monotonic() < deadline:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
                self._file = self._sock.makefile("rwb")
                return
            except OSError as e:
                last = e
                time.sleep(0.05)
        raise RendezvousTimeout(f"cannot reach rendezvous at {self.host}:{self.port}: {last}")

    def _request(self, line: str) -> str:
        with self._lock:
            for attempt in (0, 1):
                if self._sock is None:
                    self._connect()
                try:
                    self._file.write((line + "\n").encode("ascii"))
                    self._file.flush()
                    reply = self._file.readline()
                    if reply:
                        return reply.decode("ascii").strip()
                except OSError:
                    pass
                self.close()
            raise RendezvousTimeout(f"rendezvous at {self.host}:{self.port} dropped the connection")

    def put(self, key: str, value: str) -> None:
        self._request(f"PUT {quote(key, safe='')} {quote(value, safe='')}")

    def get(self, key: str) -> str | None:
        reply = self._request(f"GET {quote(key, safe='')}")
        if reply == "MISSING":
            return None
        if reply.startswith("OK"):
            return unquote(reply[3:]) if len(reply) > 3 else ""
        raise CommError(f"unexpected rendezvous reply {reply!r}")

    def wait_get(self, key: str, timeout: float, poll: float = 0.02) -> str:
        deadline = time.monotonic() + timeout
        while True:
            value = self.get(key)
            if value is not None:
                return value
            if time.monotonic() >= deadline:
                raise RendezvousTimeout(f"key {key!r} not published within {timeout}s")
            time.sleep(poll)

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
            self._file = None
