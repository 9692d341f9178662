"""Named, partitioned table retention across applications on one host.

Producers ``put`` a table collectively; consumers ``get`` it later, possibly
from a different executor with different parallelism, in which case the
partitions are re-split into contiguous near-equal chunks over the global
rank-major row order (longer chunks first, same rule as repartitioning).
``get`` blocks until the entry exists or the timeout lapses.

Two scopes exist: an in-process registry shared by every executor in the
host process, and a spill store for the TCP backend that writes ``.bspf``
partition files under ``<dir>/<namespace>/<name>/`` with a JSON manifest,
using the rendezvous key-value service as the publication marker.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import time
import uuid
from dataclasses import dataclass, field

from .comm import RendezvousClient
from .env import ExecEnv
from .errors import SchemaMismatch, Timeout
from .table import Schema, Table, concat, empty_table, slice_rows
from .tableio import read_table_file, schema_digest, serialize_table, write_table_file, deserialize_table

__all__ = [
    "StoreEntry",
    "HostStore",
    "SpillStore",
    "host_store",
    "store_put",
    "store_get",
    "store_drop",
    "store_list",
]

_TOMBSTONE = "!dropped"


@dataclass
class StoreEntry:
    name: str
    world_size: int
    schema: Schema
    partitions: list[Table]
    created_at: float = field(default_factory=time.time)


def _check_schemas(env: ExecEnv, t: Table) -> bytes:
    digest = bytes.fromhex(schema_digest(t.schema))
    digests = env.comm.allgather(digest)
    if len(set(digests)) != 1:
        raise SchemaMismatch("ranks tried to store different schemas")
    return digest


def _chunk_bounds(total: int, world_size: int, rank: int) -> tuple[int, int]:
    base, rem = divmod(total, world_size)
    start = rank * base + min(rank, rem)
    return start, start + base + (1 if rank < rem else 0)


def _extract_chunk(partitions: list[Table], schema: Schema, start: int, end: int) -> Table:
    pieces = []
    offset = 0
    for part in partitions:
        lo = max(start, offset)
        hi = min(end, offset + part.num_rows)
        if hi > lo:
            pieces.append(slice_rows(part, lo - offset, hi - lo))
        offset += part.num_rows
    return concat(pieces, schema) if pieces else empty_table(schema)


class HostStore:
    """In-process store shared by every executor in this host process."""

    def __init__(self):
        import threading

        self._cond = threading.Condition()
        self._entries: dict[str, StoreEntry] = {}
        self._pending: dict[tuple[str, str], dict[int, Table]] = {}

    def collective_put(self, env: ExecEnv, name: str, t: Table) -> None:
        _check_schemas(env, t)
        token = env.comm.broadcast(uuid.uuid4().hex.encode() if env.rank == 0 else None, 0)
        key = (name, token.decode())
        with self._cond:
            pending = self._pending.setdefault(key, {})
            pending[env.rank] = t
            if len(pending) == env.world_size:
                parts = [pending[r] for r in range(env.world_size)]
                self._entries[name] = StoreEntry(name, env.world_size, t.schema, parts)
                del self._pending[key]
                self._cond.notify_all()

    def get_blocking(self, env: ExecEnv, name: str, timeout: float) -> Table:
        deadline = time.monotonic() + timeout
        with self._cond:
            while name not in self._entries:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"store entry {name!r} not published within {timeout}s")
                self._cond.wait(remaining)
            entry = self._entries[name]
        if entry.world_size == env.world_size:
            return entry.partitions[env.rank]
        total = sum(p.num_rows for p in entry.partitions)
        start, end = _chunk_bounds(total, env.world_size, env.rank)
        return _extract_chunk(entry.partitions, entry.schema, start, end)

    def drop(self, name: str) -> None:
        with self._cond:
            self._entries.pop(name, None)

    def list(self) -> list[str]:
        with self._cond:
            return sorted(self._entries)

    def clear(self) -> None:
        with self._cond:
            self._entries.clear()
            self._pending.clear()


_HOST_STORE = HostStore()


def host_store() -> HostStore:
    return _HOST_STORE


def default_spill_dir() -> str:
    return os.path.join(tempfile.gettempdir(), "bspframe-store")


class SpillStore:
    """Spill-backed store for multi-process worlds.

    Partitions land as ``part-<rank>.bspf`` files; a manifest records the
    producer world size, schema digest, and partition lengths. Publication
    is signalled through the rendezvous store so blocked consumers wake up.
    """

    def __init__(self, rendezvous: str, root: str | None = None,
                 namespace: str = "store", timeout: float = 30.0):
        self.rendezvous = rendezvous
        self.root = root or default_spill_dir()
        self.namespace = namespace
        self.timeout = timeout
        self._rdv: RendezvousClient | None = None

    def _client(self) -> RendezvousClient:
        if self._rdv is None:
            self._rdv = RendezvousClient(self.rendezvous, timeout=self.timeout)
        return self._rdv

    def _marker_key(self, name: str) -> str:
        return f"{self.namespace}/store/{name}"

    def _entry_dir(self, name: str) -> str:
        return os.path.join(self.root, self.namespace, name)

    def collective_put(self, env: ExecEnv, name: str, t: Table) -> None:
        digest = _check_schemas(env, t)
        lengths = [
            struct.unpack("<q", b)[0]
            for b in env.comm.allgather(struct.pack("<q", t.num_rows))
        ]
        token = env.comm.broadcast(uuid.uuid4().hex.encode() if env.rank == 0 else None, 0)
        d = self._entry_dir(name)
        os.makedirs(d, exist_ok=True)
        tmp = os.path.join(d, f".part-{env.rank}.tmp")
        write_table_file(t, tmp)
        os.replace(tmp, os.path.join(d, f"part-{env.rank}.bspf"))
        env.comm.barrier()  # all partitions durable before the manifest flips
        if env.rank == 0:
            manifest = {
                "name": name,
                "world_size": env.world_size,
                "schema_digest": digest.hex(),
                "part_lengths": lengths,
                "token": token.decode(),
            }
            tmp = os.path.join(d, ".manifest.tmp")
            with open(tmp, "w") as f:
                json.dump(manifest, f)
            os.replace(tmp, os.path.join(d, "manifest.json"))
            self._client().put(self._marker_key(name), token.decode())
        env.comm.barrier()  # put returns only once the entry is visible

    def _read_manifest(self, name: str) -> dict | None:
        try:
            with open(os.path.join(self._entry_dir(name), "manifest.json")) as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError):
            return None

    def get_blocking(self, env: ExecEnv | None, name: str, timeout: float) -> Table:
        deadline = time.monotonic() + timeout
        client = self._client()
        while True:
            marker = client.get(self._marker_key(name))
            if marker is not None and marker != _TOMBSTONE:
                manifest = self._read_manifest(name)
                if manifest is not None and manifest.get("token") == marker:
                    break
            if time.monotonic() >= deadline:
                raise Timeout(f"store entry {name!r} not published within {timeout}s")
            time.sleep(0.02)
        producer_world = manifest["world_size"]
        lengths = manifest["part_lengths"]
        d = self._entry_dir(name)
        rank = env.rank if env is not None else 0
        world = env.world_size if env is not None else 1
        if world == producer_world:
            return read_table_file(os.path.join(d, f"part-{rank}.bspf"))
        total = sum(lengths)
        start, end = _chunk_bounds(total, world, rank)
        parts, offset = [], 0
        schema = None
        pieces = []
        for r, ln in enumerate(lengths):
            lo, hi = max(start, offset), min(end, offset + ln)
            if hi > lo:
                part = read_table_file(os.path.join(d, f"part-{r}.bspf"))
                schema = part.schema
                pieces.append(slice_rows(part, lo - offset, hi - lo))
            offset += ln
        if not pieces:
            any_part = read_table_file(os.path.join(d, "part-0.bspf"))
            return empty_table(any_part.schema)
        return concat(pieces, schema)

    def drop(self, name: str) -> None:
        self._client().put(self._marker_key(name), _TOMBSTONE)
        d = self._entry_dir(name)
        try:
            for fn in os.listdir(d):
                os.unlink(os.path.join(d, fn))
            os.rmdir(d)
        except OSError:
            pass

    def list(self) -> list[str]:
        base = os.path.join(self.root, self.namespace)
        names = []
        try:
            candidates = os.listdir(base)
        except OSError:
            return []
        for name in sorted(candidates):
            marker = self._client().get(self._marker_key(name))
            if marker is not None and marker != _TOMBSTONE:
                names.append(name)
        return names


def store_put(env: ExecEnv, name: str, t: Table) -> None:
    """Collectively publish ``t``'s partitions under ``name``; overwrite replaces."""
    env.store.collective_put(env, name, t)


def store_get(env: ExecEnv, name: str, timeout: float = 30.0) -> Table:
    """This rank's share of entry ``name``; blocks until published or timeout."""
    return env.store.get_blocking(env, name, timeout)


def store_drop(name: str, store=None) -> None:
    (store or _HOST_STORE).drop(name)


def store_list(store=None) -> list[str]:
    return (store or _HOST_STORE).list()
