"""Whole-table collectives built on the communicator.

The shuffle follows a two-phase protocol: ranks first exchange per-
destination byte counts (plus a schema digest and row count), then the
serialized table payloads themselves. Receivers verify the advertised
sizes and digests, so schema drift or framing bugs surface as errors
instead of corrupt tables. Tables travel as one serialized payload per
(source, destination) pair; the self slot is handed over locally without
touching the transport.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .comm import Communicator, ReduceOp
from .errors import CommError, InvalidRank, LengthMismatch, SchemaMismatch
from .table import Table, concat, empty_table, slice_rows, take
from .tableio import deserialize_table, schema_digest, serialize_table

__all__ = [
    "PartitionAssignment",
    "shuffle_table",
    "gather_table",
    "broadcast_table",
    "repartition_even",
]

_COUNTS = struct.Struct("<32sQQ")  # schema digest, payload bytes, row count


@dataclass(frozen=True)
class PartitionAssignment:
    """Per-row destination ranks for a shuffle."""

    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.int64))

    def check(self, num_rows: int, world_size: int) -> None:
        if len(self.target) != num_rows:
            raise LengthMismatch(f"{len(self.target)} targets for {num_rows} rows")
        if len(self.target) and (self.target.min() < 0 or self.target.max() >= world_size):
            raise InvalidRank("assignment target outside [0, world_size)")


def _digest_bytes(t: Table) -> bytes:
    return bytes.fromhex(schema_digest(t.schema))


def _assert_conserved(comm: Communicator, rows_in: int, rows_out: int) -> None:
    total_in = comm.allreduce_i64(rows_in, ReduceOp.SUM)
    total_out = comm.allreduce_i64(rows_out, ReduceOp.SUM)
    if total_in != total_out:
        raise CommError(f"row conservation violated: {total_in} in, {total_out} out")


def shuffle_table(
    comm: Communicator,
    t: Table,
    assign: PartitionAssignment | np.ndarray,
    return_counts: bool = False,
) -> Table | tuple[Table, list[int]]:
    """Redistribute rows so rank r ends up with every row assigned to r.

    The result concatenates contributions in source-rank order, preserving
    each source's row order, so outputs are deterministic. With
    ``return_counts`` the per-source row counts come back too.
    """
    if not isinstance(assign, PartitionAssignment):
        assign = PartitionAssignment(assign)
    assign.check(t.num_rows, comm.world_size)
    p = comm.world_size
    me = comm.rank

    with comm.timer.computation():
        order = np.argsort(assign.target, kind="stable")
        sorted_targets = assign.target[order]
        bounds = np.searchsorted(sorted_targets, np.arange(p + 1))
        pieces = [take(t, order[bounds[d]:bounds[d + 1]]) for d in range(p)]
        digest = _digest_bytes(t)
        payloads = [b"" if d == me else serialize_table(pieces[d]) for d in range(p)]
        counts_out = [
            _COUNTS.pack(digest, len(payloads[d]), pieces[d].num_rows) for d in range(p)
        ]

    counts_in = comm.all_to_all(counts_out)
    data_in = comm.all_to_all(payloads)

    with comm.timer.computation():
        parts: list[Table] = []
        row_counts: list[int] = []
        for s in range(p):
            peer_digest, nbytes, nrows = _COUNTS.unpack(counts_in[s])
            if peer_digest != digest:
                raise SchemaMismatch(f"rank {s} shuffled a different schema")
            if s == me:
                part = pieces[me]
            else:
                if len(data_in[s]) != nbytes:
                    raise CommError(
                        f"rank {s} announced {nbytes} bytes but sent {len(data_in[s])}"
                    )
                part = deserialize_table(data_in[s])
            if part.num_rows != nrows:
                raise CommError(f"rank {s} announced {nrows} rows, sent {part.num_rows}")
            parts.append(part)
            row_counts.append(nrows)
        result = concat(parts, t.schema)

    _assert_conserved(comm, t.num_rows, result.num_rows)
    if return_counts:
        return result, row_counts
    return result


def gather_table(comm: Communicator, t: Table, root: int) -> Table:
    """Concatenate every rank's table at ``root`` (rank order); empty elsewhere."""
    with comm.timer.computation():
        payload = serialize_table(t) if comm.rank != root else b""
    gathered = comm.gather(payload, root)
    if comm.rank != root:
        return empty_table(t.schema)
    with comm.timer.computation():
        parts = [t if s == root else deserialize_table(gathered[s])
                 for s in range(comm.world_size)]
        for s, part in enumerate(parts):
            if part.schema != t.schema:
                raise SchemaMismatch(f"rank {s} gathered a different schema")
        return concat(parts, t.schema)


def broadcast_table(comm: Communicator, t: Table | None, root: int) -> Table:
    """Every rank returns a table value-equal to the root's."""
    if comm.rank == root:
        if t is None:
            raise CommError("broadcast_table needs a table at the root")
        with comm.timer.computation():
            payload = serialize_table(t)
        comm.broadcast(payload, root)
        return t
    payload = comm.broadcast(None, root)
    with comm.timer.computation():
        return deserialize_table(payload)


def repartition_even(comm: Communicator, t: Table) -> Table:
    """Rebalance to contiguous near-equal chunks, preserving global row order.

    Rank r receives the r-th chunk of the rank-major global row sequence;
    chunk lengths differ by at most one (longer chunks first).
    """
    p = comm.world_size
    me = comm.rank
    lengths = [
        struct.unpack("<q", b)[0]
        for b in comm.allgather(struct.pack("<q", t.num_rows))
    ]
    total = sum(lengths)
    base, rem = divmod(total, p)
    target_lengths = [base + (1 if r < rem else 0) for r in range(p)]
    target_starts = np.cumsum([0] + target_lengths)
    my_start = sum(lengths[:me])
    my_end = my_start + t.num_rows

    with comm.timer.computation():
        pieces: list[Table] = []
        for r in range(p):
            lo = max(my_start, int(target_starts[r]))
            hi = min(my_end, int(target_starts[r + 1]))
            pieces.append(slice_rows(t, lo - my_start, max(hi - lo, 0)))
        payloads = [b"" if r == me else serialize_table(pieces[r]) for r in range(p)]

    received = comm.all_to_all(payloads)

    with comm.timer.computation():
        parts = [pieces[me] if s == me else deserialize_table(received[s])
                 for s in range(p)]
        result = concat(parts, t.schema)

    _assert_conserved(comm, t.num_rows, result.num_rows)
    return result
