"""Verification and benchmarking drivers.

``verify`` runs a distributed operator on generated shards, gathers the
result to rank 0, and compares it there against the serial kernel applied
to the concatenated inputs. ``bench`` measures operator stages after the
shards are loaded and a barrier has passed, so ingest never counts toward
the reported times; per-rank communication and computation come from the
env timer and are reported as the max over ranks (BSP wall time is gated
by the slowest rank).
"""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import GenSpec, generate, shard_paths
from .dist import dist_groupby, dist_join, dist_map, dist_sort
from .env import ExecEnv
from .errors import EngineError, MalformedCsv
from .executor import Executor, ExecutorConfig, executor_start, wait
from .kernels import (
    Aggregate,
    AggSpec,
    JoinType,
    KeySpec,
    add_scalar,
    local_groupby,
    local_hash_join,
    local_sort,
)
from .ordering import sort_order
from .table import Table, canonicalize, concat, select_columns, table_to_rows, tables_equal, take
from .table_comm import gather_table
from .tableio import read_table_file, serialize_table

__all__ = [
    "OPS",
    "BENCH_COLUMNS",
    "BenchRecord",
    "VerifyReport",
    "prepare_shards",
    "verify",
    "bench",
    "pipeline_bench",
    "report",
    "write_bench_csv",
    "read_bench_csv",
    "estimated_join_output_rows",
    "serial_reference",
    "dist_operator",
]

OPS = ("join", "groupby", "sort", "map", "pipeline")

KEY = KeySpec((0,))
GROUP_AGGS = AggSpec((
    (1, Aggregate.SUM, "v_sum"),
    (1, Aggregate.COUNT, "v_count"),
    (1, Aggregate.MIN, "v_min"),
    (1, Aggregate.MAX, "v_max"),
    (1, Aggregate.MEAN, "v_mean"),
))
PIPELINE_AGGS = AggSpec(((1, Aggregate.SUM, "v_sum"), (3, Aggregate.MEAN, "v_mean")))
MAP_SCALAR = 7
MEAN_RTOL = 1e-12


# -- comparisons ----------------------------------------------------------


def first_difference(a: Table, b: Table, float_rtol: float = 0.0) -> str:
    if a.schema != b.schema:
        return f"schemas differ: {a.schema.names} vs {b.schema.names}"
    if a.num_rows != b.num_rows:
        return f"row counts differ: {a.num_rows} vs {b.num_rows}"
    ra, rb = table_to_rows(a), table_to_rows(b)
    for i, (x, y) in enumerate(zip(ra, rb)):
        if x != y:
            return f"first differing row {i}: {x} vs {y}"
    return "tables differ within float tolerance handling"


def _compare_canonical(result: Table, expected: Table, float_rtol: float) -> tuple[bool, str]:
    rc, ec = canonicalize(result), canonicalize(expected)
    if tables_equal(rc, ec, float_rtol):
        return True, ""
    return False, first_difference(rc, ec, float_rtol)


def _tie_canonical(t: Table, keys: KeySpec, ascending: tuple[bool, ...]) -> Table:
    other = [i for i in range(t.schema.ncols) if i not in keys.columns]
    cols = [t.columns[i] for i in keys.columns] + [t.columns[i] for i in other]
    asc = list(ascending) + [True] * len(other)
    return take(t, sort_order(cols, asc))


def _compare_sorted(result: Table, expected: Table, keys: KeySpec,
                    ascending: tuple[bool, ...], float_rtol: float = 0.0) -> tuple[bool, str]:
    """Order-sensitive compare that leaves tie-block internal order free."""
    if result.schema != expected.schema or result.num_rows != expected.num_rows:
        return False, first_difference(result, expected)
    rk = select_columns(result, keys.columns)
    ek = select_columns(expected, keys.columns)
    if not tables_equal(rk, ek):
        return False, "key columns are not in the expected global order: " + first_difference(rk, ek)
    rt = _tie_canonical(result, keys, ascending)
    et = _tie_canonical(expected, keys, ascending)
    if tables_equal(rt, et, float_rtol):
        return True, ""
    return False, first_difference(rt, et, float_rtol)


# -- serial references and distributed counterparts -------------------------


def serial_pipeline(left: Table, right: Table) -> Table:
    joined = local_hash_join(left, right, KEY, KEY, JoinType.INNER)
    grouped = local_groupby(joined, KEY, PIPELINE_AGGS)
    ordered = local_sort(grouped, KEY)
    return add_scalar(ordered, 1, MAP_SCALAR)


def dist_pipeline(env: ExecEnv, left: Table, right: Table,
                  timings: list | None = None) -> Table:
    """join -> groupby -> sort -> add_scalar as one submission, local stages coalesced."""
    stages = (
        ("join", lambda l, r: dist_join(env, l, r, KEY, KEY, JoinType.INNER)),
        ("groupby", lambda t, _: dist_groupby(env, t, KEY, PIPELINE_AGGS)),
        ("sort", lambda t, _: dist_sort(env, t, KEY)),
        ("add_scalar", lambda t, _: dist_map(env, t, lambda x: add_scalar(x, 1, MAP_SCALAR))),
    )
    current = left
    for name, fn in stages:
        comm0, comp0 = env.timer.snapshot()
        t0 = time.perf_counter()
        current = fn(current, right)
        wall = time.perf_counter() - t0
        comm1, comp1 = env.timer.snapshot()
        if timings is not None:
            timings.append({
                "stage": name,
                "wall_ms": wall * 1e3,
                "comm_ms": (comm1 - comm0) * 1e3,
                "comp_ms": (comp1 - comp0) * 1e3,
                "rows_out": current.num_rows,
            })
    return current


def serial_reference(op: str, left: Table, right: Table | None,
                     join_type: JoinType = JoinType.INNER) -> Table:
    if op == "join":
        return local_hash_join(left, right, KEY, KEY, join_type)
    if op == "groupby":
        return local_groupby(left, KEY, GROUP_AGGS)
    if op == "sort":
        return local_sort(left, KEY)
    if op == "map":
        return add_scalar(left, 1, MAP_SCALAR)
    if op == "pipeline":
        return serial_pipeline(left, right)
    raise EngineError(f"unknown op {op!r}")


def dist_operator(env: ExecEnv, op: str, left: Table, right: Table | None,
                  join_type: JoinType = JoinType.INNER) -> Table:
    if op == "join":
        return dist_join(env, left, right, KEY, KEY, join_type)
    if op == "groupby":
        return dist_groupby(env, left, KEY, GROUP_AGGS)
    if op == "sort":
        return dist_sort(env, left, KEY)
    if op == "map":
        return dist_map(env, left, lambda t: add_scalar(t, 1, MAP_SCALAR))
    if op == "pipeline":
        return dist_pipeline(env, left, right)
    raise EngineError(f"unknown op {op!r}")


def compare_to_reference(op: str, result: Table, expected: Table) -> tuple[bool, str]:
    if op == "join":
        return _compare_canonical(result, expected, 0.0)
    if op == "groupby":
        return _compare_canonical(result, expected, MEAN_RTOL)
    if op == "sort":
        return _compare_sorted(result, expected, KEY, (True,))
    if op == "map":
        return _compare_canonical(result, expected, 0.0)
    if op == "pipeline":
        # pipeline keys are unique after the groupby, so sorted output is positional
        ok = tables_equal(result, expected, MEAN_RTOL)
        return (True, "") if ok else (False, first_difference(result, expected, MEAN_RTOL))
    raise EngineError(f"unknown op {op!r}")


# -- shard preparation -------------------------------------------------------


def prepare_shards(workdir: str, rows: int, cardinality: float, seed: int,
                   p: int, sides: int) -> list[list[str]]:
    """Generate (or reuse) per-rank input shards; returns one path list per side."""
    import os

    os.makedirs(workdir, exist_ok=True)
    out = []
    for side in range(sides):
        spec = GenSpec(rows=rows, cardinality=cardinality, seed=seed + side)
        base = os.path.join(
            workdir, f"gen-n{rows}-c{cardinality}-s{spec.seed}.bspf"
        )
        paths = shard_paths(base, p)
        if not all(os.path.exists(q) for q in paths):
            generate(spec, base, shards=p)
        out.append(paths)
    return out


def estimated_join_output_rows(rows: int, cardinality: float) -> float:
    m = max(1, math.ceil(cardinality * rows))
    return rows * (rows / m)


# -- worker jobs (module level so they pickle) --------------------------------


def verify_job(env: ExecEnv, op: str, join_type_value: str,
               left_paths: list[str], right_paths: list[str] | None,
               corrupt: bool = False):
    jt = JoinType(join_type_value)
    left = read_table_file(left_paths[env.rank])
    right = read_table_file(right_paths[env.rank]) if right_paths else None
    result = dist_operator(env, op, left, right, jt)
    gathered = gather_table(env.comm, result, 0)
    if env.rank != 0:
        return None
    if corrupt and gathered.num_rows:
        numeric = next(i for i, d in enumerate(gathered.schema.domains) if d.numeric)
        gathered = add_scalar(gathered, numeric, 1)
    global_left = concat([read_table_file(q) for q in left_paths])
    global_right = concat([read_table_file(q) for q in right_paths]) if right_paths else None
    expected = serial_reference(op, global_left, global_right, jt)
    ok, diff = compare_to_reference(op, gathered, expected)
    digest = hashlib.sha256(serialize_table(canonicalize(gathered))).hexdigest()
    return {"equal": ok, "diff": diff, "digest": digest, "rows_out": gathered.num_rows}


def bench_job(env: ExecEnv, op: str, join_type_value: str,
              left_paths: list[str], right_paths: list[str] | None):
    jt = JoinType(join_type_value)
    left = read_table_file(left_paths[env.rank])
    right = read_table_file(right_paths[env.rank]) if right_paths else None
    ingest_done = time.perf_counter()
    env.comm.barrier()  # data loaded and cached everywhere before the clock starts

    if op == "pipeline":
        timings: list[dict] = []
        comm0, comp0 = env.timer.snapshot()
        t0 = time.perf_counter()
        result = dist_pipeline(env, left, right, timings)
        wall = time.perf_counter() - t0
        comm1, comp1 = env.timer.snapshot()
    else:
        timings = []
        comm0, comp0 = env.timer.snapshot()
        t0 = time.perf_counter()
        result = dist_operator(env, op, left, right, jt)
        wall = time.perf_counter() - t0
        comm1, comp1 = env.timer.snapshot()

    rows_in = left.num_rows + (right.num_rows if right is not None else 0)
    return {
        "wall_ms": wall * 1e3,
        "comm_ms": (comm1 - comm0) * 1e3,
        "comp_ms": (comp1 - comp0) * 1e3,
        "rows_in": rows_in,
        "rows_out": result.num_rows,
        "stages": timings,
        "ingest_done_at": ingest_done,
        "timing_started_at": t0,
    }


# -- driver entry points -------------------------------------------------------


@dataclass
class VerifyReport:
    op: str
    backend: str
    p: int
    rows: int
    cardinality: float
    seed: int
    equal: bool
    digest: str
    rows_out: int
    diff: str = ""

    def line(self) -> str:
        status = "PASS" if self.equal else "FAIL"
        tail = "" if self.equal else f"  ({self.diff})"
        return (f"[{status}] verify op={self.op} backend={self.backend} p={self.p} "
                f"rows={self.rows} c={self.cardinality} seed={self.seed} "
                f"rows_out={self.rows_out} digest={self.digest[:12]}{tail}")


def _executor_kwargs(backend, rendezvous, namespace, timeout, workdir):
    import os

    kw = dict(timeout=timeout)
    if rendezvous:
        kw["rendezvous"] = rendezvous
    if namespace:
        kw["namespace"] = namespace
    kw["store_dir"] = os.path.join(workdir, "store")
    return kw


def verify(op: str, p: int, backend, rows: int, cardinality: float, seed: int = 0,
           workdir: str = ".bspframe-work", join_type: JoinType = JoinType.INNER,
           rendezvous: str | None = None, namespace: str | None = None,
           timeout: float = 60.0, corrupt: bool = False,
           executor: Executor | None = None) -> VerifyReport:
    """Run one distributed operator and compare against its serial oracle."""
    sides = 2 if op in ("join", "pipeline") else 1
    shards = prepare_shards(workdir, rows, cardinality, seed, p, sides)
    left_paths = shards[0]
    right_paths = shards[1] if sides == 2 else None
    own = executor is None
    ex = executor or executor_start(
        p, backend, **_executor_kwargs(backend, rendezvous, namespace, timeout, workdir)
    )
    try:
        results = wait(ex.run(verify_job, op, join_type.value, left_paths, right_paths,
                              corrupt), timeout=None)
    finally:
        if own:
            ex.stop()
    r0 = results[0]
    return VerifyReport(op=op, backend=ex.config.backend.value, p=p, rows=rows,
                        cardinality=cardinality, seed=seed, equal=r0["equal"],
                        digest=r0["digest"], rows_out=r0["rows_out"], diff=r0["diff"])


BENCH_COLUMNS = ["op", "backend", "p", "repeat", "wall_ms", "comm_ms_max",
                 "comp_ms_max", "rows_in", "rows_out", "seed"]


@dataclass
class BenchRecord:
    op: str
    backend: str
    p: int
    repeat: int
    wall_ms: float
    comm_ms_max: float
    comp_ms_max: float
    rows_in: int
    rows_out: int
    seed: int

    def row(self) -> list:
        return [self.op, self.backend, self.p, self.repeat,
                f"{self.wall_ms:.3f}", f"{self.comm_ms_max:.3f}",
                f"{self.comp_ms_max:.3f}", self.rows_in, self.rows_out, self.seed]


def write_bench_csv(records: list[BenchRecord], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_COLUMNS)
        for rec in records:
            w.writerow(rec.row())


def read_bench_csv(path: str) -> list[BenchRecord]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise MalformedCsv(str(e)) from e
    if not rows or rows[0] != BENCH_COLUMNS:
        raise MalformedCsv(f"expected header {BENCH_COLUMNS}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(BENCH_COLUMNS):
            raise MalformedCsv(f"line {lineno}: {len(row)} fields")
        try:
            out.append(BenchRecord(row[0], row[1], int(row[2]), int(row[3]),
                                   float(row[4]), float(row[5]), float(row[6]),
                                   int(row[7]), int(row[8]), int(row[9])))
        except ValueError as e:
            raise MalformedCsv(f"line {lineno}: {e}") from e
    return out


def _aggregate(per_rank: list[dict], op: str, backend: str, p: int,
               repeat: int, seed: int) -> BenchRecord:
    for r in per_rank:
        if r["ingest_done_at"] > r["timing_started_at"]:
            raise EngineError("ingest overlapped the timed window")
    return BenchRecord(
        op=op, backend=backend, p=p, repeat=repeat,
        wall_ms=max(r["wall_ms"] for r in per_rank),
        comm_ms_max=max(r["comm_ms"] for r in per_rank),
        comp_ms_max=max(r["comp_ms"] for r in per_rank),
        rows_in=sum(r["rows_in"] for r in per_rank),
        rows_out=sum(r["rows_out"] for r in per_rank),
        seed=seed,
    )


def bench(ops: list[str], p_list: list[int], backend, rows: int, cardinality: float,
          seed: int = 0, repeats: int = 3, workdir: str = ".bspframe-work",
          rendezvous: str | None = None, namespace: str | None = None,
          timeout: float = 120.0) -> list[BenchRecord]:
    """Strong-scaling measurements; one record per (op, p, repeat)."""
    records: list[BenchRecord] = []
    for p in p_list:
        ex = executor_start(p, backend,
                            **_executor_kwargs(backend, rendezvous, namespace, timeout, workdir))
        try:
            for op in ops:
                sides = 2 if op in ("join", "pipeline") else 1
                shards = prepare_shards(workdir, rows, cardinality, seed, p, sides)
                left, right = shards[0], shards[1] if sides == 2 else None
                for rep in range(repeats):
                    per_rank = wait(
                        ex.run(bench_job, op, JoinType.INNER.value, left, right),
                        timeout=None,
                    )
                    records.append(_aggregate(per_rank, op, ex.config.backend.value,
                                              p, rep, seed))
                    if op == "pipeline":
                        for si in range(len(per_rank[0]["stages"])):
                            stage = per_rank[0]["stages"][si]["stage"]
                            stage_rank = [r["stages"][si] for r in per_rank]
                            records.append(BenchRecord(
                                op=f"pipeline:{stage}", backend=ex.config.backend.value,
                                p=p, repeat=rep,
                                wall_ms=max(s["wall_ms"] for s in stage_rank),
                                comm_ms_max=max(s["comm_ms"] for s in stage_rank),
                                comp_ms_max=max(s["comp_ms"] for s in stage_rank),
                                rows_in=0,
                                rows_out=sum(s["rows_out"] for s in stage_rank),
                                seed=seed,
                            ))
        finally:
            ex.stop()
    return records


def pipeline_bench(p_list: list[int], backend, rows: int, cardinality: float,
                   seed: int = 0, repeats: int = 3, workdir: str = ".bspframe-work",
                   rendezvous: str | None = None, namespace: str | None = None,
                   timeout: float = 120.0) -> list[BenchRecord]:
    """Verify the four-stage pipeline once per p, then time it."""
    records: list[BenchRecord] = []
    for p in p_list:
        rep = verify("pipeline", p, backend, rows, cardinality, seed,
                     workdir=workdir, rendezvous=rendezvous, namespace=namespace,
                     timeout=timeout)
        if not rep.equal:
            raise EngineError(f"pipeline verification failed at p={p}: {rep.diff}")
        records.extend(bench(["pipeline"], [p], backend, rows, cardinality, seed,
                             repeats=repeats, workdir=workdir, rendezvous=rendezvous,
                             namespace=namespace, timeout=timeout))
    return records


def report(csv_path: str, plot_data_path: str | None = None) -> str:
    """Markdown per-op scaling table: median wall, speedup vs p=1, comm fraction."""
    records = read_bench_csv(csv_path)
    groups: dict[tuple[str, str], dict[int, list[BenchRecord]]] = {}
    for rec in records:
        groups.setdefault((rec.op, rec.backend), {}).setdefault(rec.p, []).append(rec)

    def median(xs):
        xs = sorted(xs)
        n = len(xs)
        return xs[n // 2] if n % 2 else 0.5 * (xs[n // 2 - 1] + xs[n // 2])

    lines = ["| op | backend | p | median_wall_ms | speedup_vs_p1 | comm_fraction |",
             "|---|---|---:|---:|---:|---:|"]
    plot_rows = []
    for (op, backend), by_p in sorted(groups.items()):
        base = median([r.wall_ms for r in by_p[1]]) if 1 in by_p else None
        for p in sorted(by_p):
            med = median([r.wall_ms for r in by_p[p]])
            fracs = []
            for r in by_p[p]:
                denom = r.comm_ms_max + r.comp_ms_max
                fracs.append(r.comm_ms_max / denom if denom > 0 else 0.0)
            frac = median(fracs)
            speedup = f"{base / med:.2f}" if base and med > 0 else ""
            lines.append(f"| {op} | {backend} | {p} | {med:.3f} | {speedup} | {frac:.3f} |")
            plot_rows.append([op, backend, p, f"{med:.3f}", speedup, f"{frac:.3f}"])
    text = "\n".join(lines)
    if plot_data_path:
        with open(plot_data_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["op", "backend", "p", "median_wall_ms", "speedup_vs_p1",
                        "comm_fraction"])
            w.writerows(plot_rows)
    return text
