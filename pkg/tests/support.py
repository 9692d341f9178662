"""Shared test machinery: brute-force oracles, random tables, gang runners.

The oracles here are deliberately naive (nested loops, dicts, Python
sorts) and never call into the kernels they check.
"""

from __future__ import annotations

import math
import threading
from typing import Sequence

import numpy as np

import bspframe as bf
from bspframe import Backend, Domain, JoinType, Schema, WorldConfig
from bspframe.kernels import Aggregate

# -- random tables -------------------------------------------------------------

ALL_DOMAINS = (Domain.INT64, Domain.FLOAT64, Domain.UTF8, Domain.BOOLEAN)

_STRING_POOL = ["", "a", "b", "ab", "ba", "zz", "longer-string", "émoji-✓", "0"]
# dyadic rationals: float sums stay exact under any association order
_FLOAT_POOL = [x / 8.0 for x in range(-40, 41)]


def random_value(rng: np.random.Generator, domain: Domain, null_p: float = 0.15):
    if null_p and rng.random() < null_p:
        return None
    if domain is Domain.INT64:
        return int(rng.integers(-8, 9))
    if domain is Domain.FLOAT64:
        return _FLOAT_POOL[int(rng.integers(0, len(_FLOAT_POOL)))]
    if domain is Domain.UTF8:
        return _STRING_POOL[int(rng.integers(0, len(_STRING_POOL)))]
    return bool(rng.integers(0, 2))


def random_schema(rng: np.random.Generator, max_cols: int = 4,
                  domains: Sequence[Domain] | None = None) -> Schema:
    ncols = int(rng.integers(1, max_cols + 1))
    if domains is None:
        domains = [ALL_DOMAINS[int(rng.integers(0, 4))] for _ in range(ncols)]
    else:
        ncols = len(domains)
    return Schema(tuple(domains), tuple(f"c{i}" for i in range(ncols)))


def random_table(rng: np.random.Generator, max_rows: int = 32,
                 schema: Schema | None = None, null_p: float = 0.15,
                 min_rows: int = 0) -> bf.Table:
    if schema is None:
        schema = random_schema(rng)
    n = int(rng.integers(min_rows, max_rows + 1))
    cols = [[random_value(rng, d, null_p) for _ in range(n)] for d in schema.domains]
    return bf.build_table(schema, cols)


def rows_of(t: bf.Table) -> list[tuple]:
    return bf.table_to_rows(t)


def assert_tables_equal(a: bf.Table, b: bf.Table, float_rtol: float = 0.0, msg: str = ""):
    assert bf.tables_equal(a, b, float_rtol), (
        f"{msg}\n a={a.schema.names} {rows_of(a)}\n b={b.schema.names} {rows_of(b)}"
    )


def assert_canonical_equal(a: bf.Table, b: bf.Table, float_rtol: float = 0.0, msg: str = ""):
    assert_tables_equal(bf.canonicalize(a), bf.canonicalize(b), float_rtol, msg)


# -- value ordering used by the reference sort ---------------------------------

def _order_key(domain: Domain, value):
    """(null_flag, comparable) implementing the documented total order."""
    if value is None:
        return (1, 0)
    if domain is Domain.FLOAT64:
        if math.isnan(value):
            return (0, (2, 0.0))
        return (0, (1, value + 0.0))  # folds -0.0 into 0.0
    if domain is Domain.BOOLEAN:
        return (0, int(value))
    return (0, value)


def sort_key_fn(domains, key_idx, ascending):
    class _Rev:
        __slots__ = ("k",)

        def __init__(self, k):
            self.k = k

        def __lt__(self, other):
            return other.k < self.k

        def __eq__(self, other):
            return self.k == other.k

    def fn(row):
        out = []
        for i, asc in zip(key_idx, ascending):
            null_flag, comparable = _order_key(domains[i], row[i])
            # null_flag comes first unreversed: nulls last regardless of direction
            out.append((null_flag, comparable if asc else _Rev(comparable)))
        return tuple(out)

    return fn


def oracle_sort(t: bf.Table, key_idx, ascending) -> list[tuple]:
    rows = rows_of(t)
    return sorted(rows, key=sort_key_fn(t.schema.domains, key_idx, ascending))


# -- reference join ------------------------------------------------------------

def _cell_eq(domain: Domain, a, b) -> bool:
    """Key equality: nulls never equal; NaN equals NaN; -0.0 equals 0.0."""
    if a is None or b is None:
        return False
    if domain is Domain.FLOAT64 and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def oracle_join(left: bf.Table, right: bf.Table, left_keys, right_keys,
                how: JoinType) -> bf.Table:
    lrows, rrows = rows_of(left), rows_of(right)
    doms = [left.schema.domains[i] for i in left_keys]
    nl_cols, nr_cols = left.schema.ncols, right.schema.ncols
    out: list[tuple] = []
    matched_right = [False] * len(rrows)
    for lr in lrows:
        hit = False
        for j, rr in enumerate(rrows):
            if all(_cell_eq(d, lr[a], rr[b])
                   for d, a, b in zip(doms, left_keys, right_keys)):
                out.append(lr + rr)
                matched_right[j] = True
                hit = True
        if not hit and how in (JoinType.LEFT, JoinType.FULL_OUTER):
            out.append(lr + (None,) * nr_cols)
    if how in (JoinType.RIGHT, JoinType.FULL_OUTER):
        for j, rr in enumerate(rrows):
            if not matched_right[j]:
                out.append((None,) * nl_cols + rr)
    names = list(left.schema.names)
    used = set(names)
    for name in right.schema.names:
        while name in used:
            name += "_r"
        used.add(name)
        names.append(name)
    schema = Schema(left.schema.domains + right.schema.domains, tuple(names))
    cols = [[row[i] for row in out] for i in range(schema.ncols)]
    return bf.build_table(schema, cols)


# -- reference groupby ----------------------------------------------------------

def _group_key(domains, key_idx, row):
    out = []
    for i in key_idx:
        v = row[i]
        if v is None:
            out.append(("null",))
        elif domains[i] is Domain.FLOAT64:
            out.append(("nan",) if math.isnan(v) else ("f", v + 0.0))
        else:
            out.append(("v", v))
    return tuple(out)


def oracle_groupby(t: bf.Table, key_idx, agg_items) -> bf.Table:
    """Dict-based aggregation: first-occurrence group order, null-skipping aggs."""
    rows = rows_of(t)
    doms = t.schema.domains
    value_cols = sorted({ci for ci, _a, _n in agg_items})
    order: list = []
    groups: dict = {}
    for row in rows:
        k = _group_key(doms, key_idx, row)
        if k not in groups:
            groups[k] = {"rep": row, "values": {ci: [] for ci in value_cols}}
            order.append(k)
        for ci in value_cols:
            if row[ci] is not None:
                groups[k]["values"][ci].append(row[ci])

    out_rows = []
    for k in order:
        g = groups[k]
        row = [g["rep"][i] for i in key_idx]
        for ci, agg, _n in agg_items:
            vs = g["values"][ci]
            if agg is Aggregate.COUNT:
                row.append(len(vs))
            elif not vs:
                row.append(None)
            elif agg is Aggregate.SUM:
                acc = vs[0]
                for v in vs[1:]:
                    acc = acc + v
                row.append(acc)
            elif agg is Aggregate.MIN:
                row.append(min(vs))
            elif agg is Aggregate.MAX:
                row.append(max(vs))
            else:  # MEAN
                acc = 0.0 if doms[ci] is Domain.FLOAT64 else 0
                for v in vs:
                    acc = acc + v
                row.append(acc / len(vs))
        out_rows.append(tuple(row))

    domains, names = [], []
    for i in key_idx:
        domains.append(doms[i])
        names.append(t.schema.names[i])
    for ci, agg, name in agg_items:
        if agg is Aggregate.COUNT:
            domains.append(Domain.INT64)
        elif agg is Aggregate.MEAN:
            domains.append(Domain.FLOAT64)
        else:
            domains.append(doms[ci])
        names.append(name)
    schema = Schema(tuple(domains), tuple(names))
    cols = [[r[i] for r in out_rows] for i in range(schema.ncols)]
    return bf.build_table(schema, cols)


# -- mailbox reference for collectives ------------------------------------------

def ref_all_to_all(outgoing_by_rank: list[list[bytes]]) -> list[list[bytes]]:
    p = len(outgoing_by_rank)
    return [[outgoing_by_rank[s][d] for s in range(p)] for d in range(p)]


def ref_allreduce(values: list[int], op) -> int:
    from bspframe import ReduceOp

    if op is ReduceOp.SUM:
        return sum(values)
    if op is ReduceOp.MIN:
        return min(values)
    return max(values)


# -- gang runner -----------------------------------------------------------------

_NS_LOCK = threading.Lock()
_NS_COUNTER = 0


def fresh_namespace(prefix: str = "t") -> str:
    global _NS_COUNTER
    with _NS_LOCK:
        _NS_COUNTER += 1
        return f"{prefix}{_NS_COUNTER}"


def run_gang(p: int, fn, backend: Backend = Backend.INPROCESS,
             rendezvous: str | None = None, timeout: float = 20.0,
             namespace: str | None = None) -> list:
    """Run fn(comm) on p communicator threads; returns rank-ordered results.

    Re-raises the first exception (by rank) after all threads finish.
    """
    ns = namespace or fresh_namespace()
    results: list = [None] * p
    failures: list = [None] * p

    def body(rank: int):
        comm = None
        try:
            comm = bf.comm_init(WorldConfig(
                world_size=p, rank=rank, backend=backend,
                rendezvous=rendezvous, namespace=ns, timeout=timeout,
            ))
            results[rank] = fn(comm)
        except BaseException as e:  # noqa: BLE001
            failures[rank] = e
        finally:
            if comm is not None:
                comm.close()

    threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(p)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=timeout + 30)
    for e in failures:
        if e is not None:
            raise e
    return results


# -- executor jobs (module level so TCP workers can import them) -----------------

def job_rank(env):
    return env.rank


def job_rank_sum(env):
    return env.comm.allreduce_i64(env.rank, bf.ReduceOp.SUM)


def job_comm_identity(env):
    return (env.comm.init_stamp, id(env.comm))


def job_none(env):
    return None


def job_raise_on(env, bad_rank):
    if env.rank == bad_rank:
        raise RuntimeError(f"boom on {env.rank}")
    return env.rank


def job_read_csv_count(env, paths):
    from bspframe import Domain, read_csv

    t = read_csv(paths[env.rank], [Domain.INT64, Domain.INT64])
    return env.comm.allreduce_i64(t.num_rows, bf.ReduceOp.SUM)


def job_sleep_ms(env, ms):
    import time

    time.sleep(ms / 1000.0)
    return env.rank


def job_store_put(env, name, rows_per_rank):
    t = bf.build_table(
        Schema((Domain.INT64,), ("x",)),
        [[env.rank * 100 + i for i in range(rows_per_rank[env.rank])]],
    )
    bf.store_put(env, name, t)
    return t.num_rows


def job_store_get(env, name, timeout=10.0):
    t = bf.store_get(env, name, timeout)
    return bf.table_to_rows(t)


class CounterExecutable:
    def __init__(self, env, start=0):
        self.count = start

    def bump(self, env):
        self.count += 1
        return (env.rank, self.count)

    def current(self, env):
        return self.count


class BoomExecutable:
    def __init__(self, env, bad_rank):
        if env.rank == bad_rank:
            raise ValueError("cannot construct here")
