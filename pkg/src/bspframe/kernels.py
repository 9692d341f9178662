"""Single-partition compute kernels.

These are the local building blocks the distributed operators compose:
hash-based equi-join, hash groupby with decomposable aggregates, stable
multi-key sort, regular-sampling splitter selection, range partitioning,
and elementwise column math. All kernels are pure functions on immutable
tables and lean on the dense order codes from :mod:`bspframe.ordering` so
the hot paths run as vectorized numpy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DomainMismatch
from .ordering import composite_codes, hash_values, joint_codes, sort_order
from .table import (
    Column,
    Domain,
    Schema,
    Table,
    empty_table,
    gather_column,
    select_columns,
    take,
)

__all__ = [
    "KeySpec",
    "Aggregate",
    "AggSpec",
    "JoinType",
    "hash_keys",
    "local_hash_join",
    "local_groupby",
    "local_sort",
    "partial_aggregate",
    "final_combine",
    "select_splitter_candidates",
    "range_partition",
    "merge_sorted_runs",
    "add_scalar",
]


@dataclass(frozen=True)
class KeySpec:
    """Ordered key column indices; every other column is a value column."""

    columns: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if not self.columns:
            raise DomainMismatch("a key spec needs at least one column")
        if len(set(self.columns)) != len(self.columns):
            raise DomainMismatch("key columns must be distinct")

    def check(self, schema: Schema) -> None:
        for i in self.columns:
            if not 0 <= i < schema.ncols:
                raise DomainMismatch(f"key column {i} out of range")


class Aggregate(enum.Enum):
    SUM = "sum"
    COUNT = "count"
    MIN = "min"
    MAX = "max"
    MEAN = "mean"


class JoinType(enum.Enum):
    INNER = "inner"
    LEFT = "left"
    RIGHT = "right"
    FULL_OUTER = "full_outer"


@dataclass(frozen=True)
class AggSpec:
    """Aggregations as ``(value column index, aggregate, output name)`` triples."""

    items: tuple[tuple[int, Aggregate, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(tuple(it) for it in self.items))

    def check(self, schema: Schema) -> None:
        for ci, agg, _name in self.items:
            if not 0 <= ci < schema.ncols:
                raise DomainMismatch(f"aggregate column {ci} out of range")
            if agg is not Aggregate.COUNT and not schema.domains[ci].numeric:
                raise DomainMismatch(
                    f"{agg.value} requires a numeric column, got {schema.domains[ci].value}"
                )


def hash_keys(t: Table, keys: KeySpec) -> np.ndarray:
    """Per-row uint64 hash of the key tuple; stable across processes and runs."""
    keys.check(t.schema)
    return hash_values([t.columns[i] for i in keys.columns])


# -- join ----------------------------------------------------------------

def _joined_schema(left: Schema, right: Schema) -> Schema:
    names = list(left.names)
    used = set(names)
    for name in right.names:
        while name in used:
            name = name + "_r"
        used.add(name)
        names.append(name)
    return Schema(left.domains + right.domains, tuple(names))


def _gather_side(t: Table, indices: np.ndarray, missing: np.ndarray) -> list[Column]:
    if t.num_rows == 0:
        # every gather must be a miss; synthesize all-null columns
        from .table import _null_column

        return [_null_column(d, len(indices)) for d in t.schema.domains]
    return [gather_column(c, indices, missing) for c in t.columns]


def local_hash_join(
    left: Table,
    right: Table,
    left_keys: KeySpec,
    right_keys: KeySpec,
    how: JoinType,
) -> Table:
    """Relational equi-join of two tables.

    Null keys never match (SQL semantics) but survive in outer results.
    Output rows are ordered left-row-major with matches in right row order;
    unmatched right rows (right/full outer) are appended in right row order.
    Right column names that clash with a left name get an ``_r`` suffix.
    """
    left_keys.check(left.schema)
    right_keys.check(right.schema)
    if len(left_keys.columns) != len(right_keys.columns):
        raise DomainMismatch("join key counts differ")
    for li, ri in zip(left_keys.columns, right_keys.columns):
        if left.schema.domains[li] is not right.schema.domains[ri]:
            raise DomainMismatch(
                f"key domains differ: {left.schema.domains[li]} vs {right.schema.domains[ri]}"
            )

    nl, nr = left.num_rows, right.num_rows
    stacked = []
    for li, ri in zip(left_keys.columns, right_keys.columns):
        lc, rc = joint_codes([left.columns[li], right.columns[ri]])
        stacked.append(np.concatenate([lc, rc]))
    comp = composite_codes(stacked)
    lcomp, rcomp = comp[:nl].copy(), comp[nl:].copy()
    lnull = np.zeros(nl, dtype=np.bool_)
    rnull = np.zeros(nr, dtype=np.bool_)
    for li, ri in zip(left_keys.columns, right_keys.columns):
        lnull |= ~left.columns[li].validity
        rnull |= ~right.columns[ri].validity
    lcomp[lnull] = -1  # sentinels never equal, so null keys never match
    rcomp[rnull] = -2

    rorder = np.argsort(rcomp, kind="stable")
    rsorted = rcomp[rorder]
    lo = np.searchsorted(rsorted, lcomp, side="left")
    counts = np.searchsorted(rsorted, lcomp, side="right") - lo

    keep_left = how in (JoinType.LEFT, JoinType.FULL_OUTER)
    out_counts = np.maximum(counts, 1) if keep_left else counts
    total = int(out_counts.sum())
    left_idx = np.repeat(np.arange(nl, dtype=np.int64), out_counts)
    block_starts = np.cumsum(out_counts) - out_counts
    within = np.arange(total, dtype=np.int64) - np.repeat(block_starts, out_counts)
    right_missing = (
        np.repeat(counts == 0, out_counts) if keep_left else np.zeros(total, dtype=np.bool_)
    )
    rpos = np.where(right_missing, 0, np.repeat(lo, out_counts) + within)
    right_idx = rorder[rpos] if nr else np.zeros(total, dtype=np.int64)
    left_missing = np.zeros(total, dtype=np.bool_)

    if how in (JoinType.RIGHT, JoinType.FULL_OUTER):
        matched = np.zeros(nr, dtype=np.bool_)
        hit = right_idx[~right_missing] if total else np.zeros(0, dtype=np.int64)
        matched[hit] = True
        tail = np.flatnonzero(~matched)
        left_idx = np.concatenate([left_idx, np.zeros(len(tail), dtype=np.int64)])
        left_missing = np.concatenate([left_missing, np.ones(len(tail), dtype=np.bool_)])
        right_idx = np.concatenate([right_idx, tail])
        right_missing = np.concatenate([right_missing, np.zeros(len(tail), dtype=np.bool_)])

    schema = _joined_schema(left.schema, right.schema)
    cols = _gather_side(left, left_idx, left_missing) + _gather_side(right, right_idx, right_missing)
    return Table(schema, tuple(cols), len(left_idx))


# -- groupby --------------------------------------------------------------

def _group_layout(t: Table, keys: KeySpec):
    """Group rows by key tuple, numbering groups in first-occurrence order."""
    from .ordering import group_rows

    gid, reps = group_rows([t.columns[i] for i in keys.columns])
    order = np.argsort(gid, kind="stable")
    starts = np.searchsorted(gid[order], np.arange(len(reps)))
    return gid, reps, order, starts


_AGG_OUT_DOMAIN = {
    Aggregate.COUNT: lambda d: Domain.INT64,
    Aggregate.SUM: lambda d: d,
    Aggregate.MIN: lambda d: d,
    Aggregate.MAX: lambda d: d,
    Aggregate.MEAN: lambda d: Domain.FLOAT64,
}


def _segment_agg(col: Column, agg: Aggregate, order: np.ndarray, starts: np.ndarray):
    """Aggregate one column over contiguous groups; returns (data, validity)."""
    g = len(starts)
    valid = col.validity[order]
    counts = np.add.reduceat(valid.astype(np.int64), starts) if g else np.zeros(0, np.int64)
    if agg is Aggregate.COUNT:
        return counts, np.ones(g, dtype=np.bool_)
    data = col.data[order]
    present = counts > 0
    if agg is Aggregate.SUM or agg is Aggregate.MEAN:
        masked = np.where(valid, data, data.dtype.type(0))
        sums = np.add.reduceat(masked, starts) if g else masked[:0]
        if agg is Aggregate.SUM:
            sums = np.where(present, sums, data.dtype.type(0))
            return sums, present
        means = sums.astype(np.float64) / np.maximum(counts, 1)
        return np.where(present, means, 0.0), present
    if col.domain is Domain.FLOAT64:
        hi, lo = np.float64("inf"), np.float64("-inf")
    else:
        hi, lo = np.iinfo(np.int64).max, np.iinfo(np.int64).min
    sentinel = hi if agg is Aggregate.MIN else lo
    masked = np.where(valid, data, data.dtype.type(sentinel))
    op = np.minimum if agg is Aggregate.MIN else np.maximum
    vals = op.reduceat(masked, starts) if g else masked[:0]
    return np.where(present, vals, data.dtype.type(0)), present


def local_groupby(t: Table, keys: KeySpec, aggs: AggSpec) -> Table:
    """One row per distinct key tuple, in first-occurrence order.

    Aggregates skip nulls; a group with no present value yields null
    (COUNT yields 0). A null key is a group of its own.
    """
    keys.check(t.schema)
    aggs.check(t.schema)
    _gid, reps, order, starts = _group_layout(t, keys)
    key_part = take(select_columns(t, keys.columns), reps)
    domains = list(key_part.schema.domains)
    names = list(key_part.schema.names)
    cols = list(key_part.columns)
    for ci, agg, name in aggs.items:
        data, validity = _segment_agg(t.columns[ci], agg, order, starts)
        dom = _AGG_OUT_DOMAIN[agg](t.schema.domains[ci])
        cols.append(Column(dom, data, validity))
        domains.append(dom)
        names.append(name)
    return Table(Schema(tuple(domains), tuple(names)), tuple(cols), len(reps))


def _mean_count_name(name: str) -> str:
    return f"{name}@count"


def partial_aggregate(t: Table, keys: KeySpec, aggs: AggSpec) -> Table:
    """Per-partition pre-aggregation whose outputs combine exactly.

    Output layout: key columns first (in key order), then one accumulator
    column per aggregate; MEAN carries a sum plus a ``<name>@count`` column
    so the global mean can be rebuilt from sums and counts.
    """
    keys.check(t.schema)
    aggs.check(t.schema)
    expanded = []
    for ci, agg, name in aggs.items:
        if agg is Aggregate.MEAN:
            expanded.append((ci, Aggregate.SUM, name))
            expanded.append((ci, Aggregate.COUNT, _mean_count_name(name)))
        else:
            expanded.append((ci, agg, name))
    return local_groupby(t, keys, AggSpec(tuple(expanded)))


_COMBINE_OP = {
    Aggregate.SUM: Aggregate.SUM,
    Aggregate.COUNT: Aggregate.SUM,
    Aggregate.MIN: Aggregate.MIN,
    Aggregate.MAX: Aggregate.MAX,
}


def final_combine(t: Table, keys: KeySpec, aggs: AggSpec) -> Table:
    """Combine concatenated ``partial_aggregate`` outputs into final aggregates.

    ``t`` must use the partial layout (keys first); only the key count of
    ``keys`` matters here. Law: ``final_combine(concat(partials))`` equals
    ``local_groupby`` of the concatenated raw input.
    """
    k = len(keys.columns)
    inner_keys = KeySpec(tuple(range(k)))
    pos = k
    plan = []  # (agg, final name, partial col, count col or None)
    for _ci, agg, name in aggs.items:
        if agg is Aggregate.MEAN:
            plan.append((agg, name, pos, pos + 1))
            pos += 2
        else:
            plan.append((agg, name, pos, None))
            pos += 1
    if pos != t.schema.ncols:
        raise DomainMismatch("partial table layout does not match aggregate spec")

    combine_items = []
    for agg, name, col, cnt in plan:
        if agg is Aggregate.MEAN:
            combine_items.append((col, Aggregate.SUM, name))
            combine_items.append((cnt, Aggregate.SUM, _mean_count_name(name)))
        else:
            combine_items.append((col, _COMBINE_OP[agg], name))
    combined = local_groupby(t, inner_keys, AggSpec(tuple(combine_items)))

    domains = list(combined.schema.domains[:k])
    names = list(combined.schema.names[:k])
    cols = list(combined.columns[:k])
    pos = k
    for agg, name, _col, _cnt in plan:
        if agg is Aggregate.MEAN:
            sums, counts = combined.columns[pos], combined.columns[pos + 1]
            pos += 2
            n = counts.data * counts.validity
            present = n > 0
            means = sums.data.astype(np.float64) / np.maximum(n, 1)
            cols.append(Column(Domain.FLOAT64, np.where(present, means, 0.0), present))
            domains.append(Domain.FLOAT64)
        else:
            cols.append(combined.columns[pos])
            domains.append(combined.schema.domains[pos])
            pos += 1
        names.append(name)
    return Table(Schema(tuple(domains), tuple(names)), tuple(cols), combined.num_rows)


# -- sort ----------------------------------------------------------------

def local_sort(t: Table, keys: KeySpec, ascending: tuple[bool, ...] | None = None) -> Table:
    """Stable lexicographic sort by key columns; nulls last either direction."""
    keys.check(t.schema)
    if ascending is None:
        ascending = (True,) * len(keys.columns)
    order = sort_order([t.columns[i] for i in keys.columns], ascending)
    return take(t, order)


def select_splitter_candidates(sorted_t: Table, keys: KeySpec, count: int) -> Table:
    """``count`` regularly spaced key rows from a locally sorted table."""
    keys.check(sorted_t.schema)
    n = sorted_t.num_rows
    projected = select_columns(sorted_t, keys.columns)
    if n <= count:
        return projected
    idx = (np.arange(count, dtype=np.int64) * n) // count
    return take(projected, idx)


def range_partition(
    sorted_t: Table,
    keys: KeySpec,
    splitters: Table,
    ascending: tuple[bool, ...] | None = None,
) -> np.ndarray:
    """Destination rank per row: the number of splitters at or below its key.

    ``splitters`` holds p-1 key rows sorted in the same key order. Rows and
    splitters compare under the sort order (per-key direction, nulls last),
    so the assignment is monotone non-decreasing over sorted input.
    """
    keys.check(sorted_t.schema)
    if ascending is None:
        ascending = (True,) * len(keys.columns)
    n = sorted_t.num_rows
    assignment = np.zeros(n, dtype=np.int64)
    if splitters.num_rows == 0 or n == 0:
        return assignment
    row_codes, split_codes = [], []
    for j, ki in enumerate(keys.columns):
        rc, sc = joint_codes(
            [sorted_t.columns[ki], splitters.columns[j]], descending=not ascending[j]
        )
        row_codes.append(rc)
        split_codes.append(sc)
    for s in range(splitters.num_rows):
        lt = np.zeros(n, dtype=np.bool_)
        eq = np.ones(n, dtype=np.bool_)
        for rc, sc in zip(row_codes, split_codes):
            lt |= eq & (rc < sc[s])
            eq &= rc == sc[s]
        assignment += ~lt  # row key >= splitter s
    return assignment


def merge_sorted_runs(
    t: Table,
    run_lengths: list[int],
    keys: KeySpec,
    ascending: tuple[bool, ...] | None = None,
) -> Table:
    """Merge consecutive sorted runs of ``t`` into one sorted table.

    Stable across runs: ties keep earlier-run rows first. Used as the final
    local stage of the distributed sort instead of re-sorting.
    """
    keys.check(t.schema)
    if ascending is None:
        ascending = (True,) * len(keys.columns)
    if sum(run_lengths) != t.num_rows:
        raise DomainMismatch("run lengths do not cover the table")
    comp = composite_codes(
        [
            joint_codes([t.columns[i]], descending=not asc)[0]
            for i, asc in zip(keys.columns, ascending)
        ]
    )
    runs: list[np.ndarray] = []
    pos = 0
    for ln in run_lengths:
        if ln:
            runs.append(np.arange(pos, pos + ln, dtype=np.int64))
        pos += ln
    if not runs:
        return t
    while len(runs) > 1:
        nxt = []
        for i in range(0, len(runs) - 1, 2):
            a, b = runs[i], runs[i + 1]
            ca, cb = comp[a], comp[b]
            merged = np.empty(len(a) + len(b), dtype=np.int64)
            merged[np.arange(len(a)) + np.searchsorted(cb, ca, side="left")] = a
            merged[np.arange(len(b)) + np.searchsorted(ca, cb, side="right")] = b
            nxt.append(merged)
        if len(runs) % 2:
            nxt.append(runs[-1])
        runs = nxt
    return take(t, runs[0])


# -- elementwise ----------------------------------------------------------

def add_scalar(t: Table, col: int, s) -> Table:
    """Add ``s`` to every present value of a numeric column; nulls stay null."""
    if not 0 <= col < t.schema.ncols:
        raise DomainMismatch(f"column {col} out of range")
    c = t.columns[col]
    if c.domain is Domain.INT64:
        if isinstance(s, bool) or not isinstance(s, (int, np.integer)):
            raise DomainMismatch("int64 column needs an int scalar")
        data = np.where(c.validity, c.data + np.int64(s), np.int64(0))
    elif c.domain is Domain.FLOAT64:
        if isinstance(s, bool) or not isinstance(s, (int, float, np.integer, np.floating)):
            raise DomainMismatch("float64 column needs a numeric scalar")
        data = np.where(c.validity, c.data + np.float64(s), np.float64(0.0))
    else:
        raise DomainMismatch(f"add_scalar needs a numeric column, got {c.domain.value}")
    cols = list(t.columns)
    cols[col] = Column(c.domain, data, c.validity)
    return Table(t.schema, tuple(cols), t.num_rows)
