"""Distributed operators: local kernels composed around table collectives.

Each operator is collective: every rank calls it in the same order with
rank-consistent arguments. Communication time accrues only inside the
communicator's collectives; local stages run under computation scopes, so
the per-rank comm/comp split of an operator falls out of the env timer.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .env import ExecEnv
from .kernels import (
    AggSpec,
    JoinType,
    KeySpec,
    hash_keys,
    final_combine,
    local_hash_join,
    local_sort,
    merge_sorted_runs,
    partial_aggregate,
    range_partition,
    select_splitter_candidates,
)
from .ordering import sort_order
from .table import Table, concat, empty_table, take
from .table_comm import PartitionAssignment, shuffle_table
from .tableio import deserialize_table, serialize_table

__all__ = ["dist_join", "dist_groupby", "dist_sort", "dist_map", "splitter_select"]


def _hash_assignment(env: ExecEnv, t: Table, keys: KeySpec) -> PartitionAssignment:
    target = (hash_keys(t, keys) % np.uint64(env.world_size)).astype(np.int64)
    return PartitionAssignment(target)


def dist_join(
    env: ExecEnv,
    left: Table,
    right: Table,
    left_keys: KeySpec,
    right_keys: KeySpec,
    how: JoinType = JoinType.INNER,
) -> Table:
    """Hash-shuffle both sides on their keys, then join co-located partitions."""
    with env.timer.computation():
        lassign = _hash_assignment(env, left, left_keys)
        rassign = _hash_assignment(env, right, right_keys)
    lpart = shuffle_table(env.comm, left, lassign)
    rpart = shuffle_table(env.comm, right, rassign)
    with env.timer.computation():
        return local_hash_join(lpart, rpart, left_keys, right_keys, how)


def dist_groupby(env: ExecEnv, t: Table, keys: KeySpec, aggs: AggSpec) -> Table:
    """Combine-shuffle-reduce: pre-aggregate locally, shuffle partials, combine."""
    k = len(keys.columns)
    partial_keys = KeySpec(tuple(range(k)))  # partial layout puts keys first
    with env.timer.computation():
        partial = partial_aggregate(t, keys, aggs)
        assign = _hash_assignment(env, partial, partial_keys)
    shuffled = shuffle_table(env.comm, partial, assign)
    with env.timer.computation():
        return final_combine(shuffled, keys, aggs)


def splitter_select(
    candidates: Table,
    p: int,
    keys: KeySpec | None = None,
    ascending: tuple[bool, ...] | None = None,
) -> Table:
    """Pick p-1 range splitters from the allgathered candidate rows.

    Sorts the candidates and takes rows at indices ceil(i*C/p), i in 1..p-1
    (clamped into range), so every rank derives identical splitters.
    """
    if keys is None:
        keys = KeySpec(tuple(range(candidates.schema.ncols)))
    if ascending is None:
        ascending = (True,) * len(keys.columns)
    c = candidates.num_rows
    if p <= 1 or c == 0:
        return empty_table(candidates.schema)
    order = sort_order([candidates.columns[i] for i in keys.columns], ascending)
    sorted_c = take(candidates, order)
    idx = [min(-(-(i * c) // p), c - 1) for i in range(1, p)]
    return take(sorted_c, np.asarray(idx, dtype=np.int64))


def dist_sort(
    env: ExecEnv,
    t: Table,
    keys: KeySpec,
    ascending: tuple[bool, ...] | None = None,
) -> Table:
    """Sample sort: local sort, sampled splitters, range shuffle, p-way merge.

    Afterward each rank is locally sorted and the rank-major concatenation
    is globally sorted; the global row multiset is unchanged.
    """
    if ascending is None:
        ascending = (True,) * len(keys.columns)
    p = env.world_size
    with env.timer.computation():
        sorted_local = local_sort(t, keys, ascending)
        candidates = select_splitter_candidates(sorted_local, keys, p)
        payload = serialize_table(candidates)
    gathered = env.comm.allgather(payload)
    with env.timer.computation():
        all_candidates = concat([deserialize_table(b) for b in gathered])
        splitters = splitter_select(all_candidates, p, ascending=ascending)
        assign = PartitionAssignment(
            range_partition(sorted_local, keys, splitters, ascending)
        )
    shuffled, run_lengths = shuffle_table(env.comm, sorted_local, assign, return_counts=True)
    with env.timer.computation():
        return merge_sorted_runs(shuffled, run_lengths, keys, ascending)


def dist_map(env: ExecEnv, t: Table, op: Callable[[Table], Table]) -> Table:
    """Apply a pure local transform to this rank's partition; no communication."""
    with env.timer.computation():
        return op(t)
