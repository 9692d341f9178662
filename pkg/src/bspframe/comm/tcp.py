"""TCP transport: full-mesh sockets bootstrapped through the rendezvous store.

Each rank opens a listener, publishes its address under
``<namespace>/rank/<r>``, polls until every peer is published, then forms
the mesh: rank r initiates connections to lower ranks and accepts from
higher ones. One reader thread per peer parses frames into the mailbox;
sends are blocking writes under a per-peer lock (readers always drain, so
writes cannot deadlock).

Wire frame, little-endian: u32 magic 0x42535046, u8 opcode, u32 sequence,
u32 source rank, u32 tag, u64 payload length, payload bytes. The first
frame on a fresh connection is a hello carrying the namespace, which lets
the acceptor identify and validate the peer.
"""

from __future__ import annotations

import socket
import struct
import threading
import time

from ..errors import (
    CommError,
    DuplicateRank,
    PeerFailure,
    RendezvousTimeout,
    WorldSizeMismatch,
)
from .core import OP_P2P, Communicator, Envelope, WorldConfig
from .rendezvous import RendezvousClient, parse_address

__all__ = ["init_tcp", "TcpCommunicator", "FRAME_MAGIC"]

FRAME_MAGIC = 0x42535046
_HEADER = struct.Struct("<IBIIIQ")
_HELLO_TAG = 0xFFFFFFFF


def _encode_frame(env: Envelope) -> bytes:
    return _HEADER.pack(FRAME_MAGIC, env.opcode, env.seq, env.src, env.tag,
                        len(env.payload)) + env.payload


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> Envelope:
    magic, opcode, seq, src, tag, length = _HEADER.unpack(_read_exact(sock, _HEADER.size))
    if magic != FRAME_MAGIC:
        raise CommError(f"bad frame magic {magic:#x}")
    payload = _read_exact(sock, length) if length else b""
    return Envelope(opcode, seq, src, tag, payload)


class TcpCommunicator(Communicator):
    def __init__(self, config: WorldConfig, socks: dict[int, socket.socket],
                 listener: socket.socket):
        super().__init__(config)
        self._socks = socks
        self._listener = listener
        self._send_locks = {r: threading.Lock() for r in socks}
        self._closing = False
        self._readers = [
            threading.Thread(target=self._reader, args=(r, s),
                             name=f"comm-reader-{config.rank}-{r}", daemon=True)
            for r, s in socks.items()
        ]
        for t in self._readers:
            t.start()

    def _reader(self, peer: int, sock: socket.socket) -> None:
        while True:
            try:
                env = _read_frame(sock)
            except (ConnectionError, OSError, CommError) as e:
                if not self._closing:
                    self._mailbox.fail_src(peer, PeerFailure(f"rank {peer}: {e}"))
                return
            self._mailbox.put(env)

    def _post(self, dest: int, env: Envelope) -> None:
        if dest == self.rank:
            self._mailbox.put(env)
            return
        frame = _encode_frame(env)
        try:
            with self._send_locks[dest]:
                self._socks[dest].sendall(frame)
        except OSError as e:
            raise PeerFailure(f"send to rank {dest} failed: {e}") from e

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._closing = True
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        try:
            self._listener.close()
        except OSError:
            pass
        for t in self._readers:
            t.join(timeout=2.0)


def _rank_key(ns: str, rank: int) -> str:
    return f"{ns}/rank/{rank}"


def init_tcp(config: WorldConfig) -> TcpCommunicator:
    """Register with the rendezvous store and form the full mesh."""
    if not config.rendezvous:
        raise CommError("TCP backend needs a rendezvous address")
    rdv = RendezvousClient(config.rendezvous, timeout=config.timeout)
    deadline = time.monotonic() + config.timeout
    ns, rank, p = config.namespace, config.rank, config.world_size

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((config.bind_host, 0))
    listener.listen(p + 1)
    my_addr = f"{listener.getsockname()[0]}:{listener.getsockname()[1]}"

    try:
        # World-size consistency: first writer pins it.
        size_key = f"{ns}/world_size"
        published = rdv.get(size_key)
        if published is None:
            rdv.put(size_key, str(p))
            published = rdv.get(size_key)
        if published != str(p):
            raise WorldSizeMismatch(f"world {ns!r} registered with size {published}, not {p}")

        if rdv.get(_rank_key(ns, rank)) is not None:
            raise DuplicateRank(f"rank {rank} already registered in world {ns!r}")
        rdv.put(_rank_key(ns, rank), my_addr)

        addrs: dict[int, str] = {}
        for r in range(p):
            if r == rank:
                continue
            addrs[r] = rdv.wait_get(_rank_key(ns, r), max(deadline - time.monotonic(), 0.001))

        socks: dict[int, socket.socket] = {}
        hello = Envelope(OP_P2P, 0, rank, _HELLO_TAG, ns.encode("utf-8"))
        for r in range(rank):  # initiate toward lower ranks
            sock = socket.create_connection(parse_address(addrs[r]), timeout=config.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(_encode_frame(hello))
            socks[r] = sock
        while len(socks) < p - 1:  # accept from higher ranks
            listener.settimeout(max(deadline - time.monotonic(), 0.001))
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                raise RendezvousTimeout(
                    f"world {ns!r}: only {len(socks)} of {p - 1} peers connected "
                    f"within {config.timeout}s"
                ) from None
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(config.timeout)
            env = _read_frame(sock)
            sock.settimeout(None)
            if env.tag != _HELLO_TAG or env.payload.decode("utf-8") != ns:
                sock.close()
                raise CommError(f"unexpected hello from {env.src}")
            socks[env.src] = sock
        listener.settimeout(None)
    except Exception:
        listener.close()
        rdv.close()
        raise

    rdv.close()
    comm = TcpCommunicator(config, socks, listener)
    comm.barrier()  # init acts as a barrier: nobody proceeds until the mesh works
    return comm
