"""Command-line harness: data generation, verification, and benchmarks."""

from __future__ import annotations

import argparse
import sys
import time

from .comm import Backend, RendezvousServer
from .datagen import GenSpec, generate
from .errors import EngineError
from .kernels import JoinType

_BACKENDS = {"inproc": Backend.INPROCESS, "tcp": Backend.TCP}


def _add_common(p: argparse.ArgumentParser, *, parallelism_list: bool = False) -> None:
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--cardinality", type=float, default=0.9,
                   help="fraction of unique keys in the generated data")
    p.add_argument("--seed", type=int, default=0)
    if parallelism_list:
        p.add_argument("--parallelism", type=int, nargs="+", default=[1, 2, 4])
    else:
        p.add_argument("--parallelism", type=int, default=2)
    p.add_argument("--backend", choices=sorted(_BACKENDS), default="inproc")
    p.add_argument("--rendezvous", metavar="HOST:PORT", default=None)
    p.add_argument("--namespace", default=None)
    p.add_argument("--workdir", default=".bspframe-work")
    p.add_argument("--timeout", type=float, default=120.0)


def _cmd_generate(args) -> int:
    spec = GenSpec(rows=args.rows, cardinality=args.cardinality,
                   columns=args.columns, seed=args.seed)
    try:
        paths = generate(spec, args.out, shards=args.shards)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


def _cmd_verify(args) -> int:
    from .bench import verify

    rep = verify(args.op, args.parallelism, _BACKENDS[args.backend],
                 args.rows, args.cardinality, args.seed, workdir=args.workdir,
                 join_type=JoinType(args.join_type), rendezvous=args.rendezvous,
                 namespace=args.namespace, timeout=args.timeout,
                 corrupt=args.corrupt)
    print(rep.line())
    return 0 if rep.equal else 1


def _cmd_bench(args) -> int:
    from .bench import bench, write_bench_csv

    try:
        records = bench(args.ops, args.parallelism, _BACKENDS[args.backend],
                        args.rows, args.cardinality, args.seed, repeats=args.repeats,
                        workdir=args.workdir, rendezvous=args.rendezvous,
                        namespace=args.namespace, timeout=args.timeout)
        write_bench_csv(records, args.out)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_pipeline(args) -> int:
    from .bench import pipeline_bench, write_bench_csv

    try:
        records = pipeline_bench(args.parallelism, _BACKENDS[args.backend],
                                 args.rows, args.cardinality, args.seed,
                                 repeats=args.repeats, workdir=args.workdir,
                                 rendezvous=args.rendezvous, namespace=args.namespace,
                                 timeout=args.timeout)
        write_bench_csv(records, args.out)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_report(args) -> int:
    from .bench import report

    text = report(args.csv, plot_data_path=args.plot_data)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def _cmd_rendezvous(args) -> int:
    server = RendezvousServer(args.host, args.port).start()
    print(f"rendezvous listening on {server.address}", flush=True)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return 0


def _cmd_worker(_args) -> int:
    from .executor import worker_main

    return worker_main()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bspframe",
        description="Distributed dataframe engine: generation, verification, benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write uniform int64 tables with controlled cardinality")
    g.add_argument("--rows", type=int, default=100_000)
    g.add_argument("--cardinality", type=float, default=0.9)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--columns", type=int, default=2)
    g.add_argument("--shards", type=int, default=None,
                   help="emit one pre-partitioned shard per target rank")
    g.add_argument("--out", required=True, help=".bspf or .csv path")
    g.set_defaults(fn=_cmd_generate)

    v = sub.add_parser("verify", help="check a distributed operator against the serial oracle")
    v.add_argument("--op", choices=("join", "groupby", "sort", "map", "pipeline"),
                   default="join")
    v.add_argument("--join-type", choices=[jt.value for jt in JoinType],
                   default="inner")
    v.add_argument("--corrupt", action="store_true",
                   help="debug: corrupt the result to prove the harness detects it")
    _add_common(v)
    v.set_defaults(fn=_cmd_verify)

    b = sub.add_parser("bench", help="strong-scaling timings with comm/comp breakdown")
    b.add_argument("--ops", nargs="+", default=["join", "groupby", "sort"],
                   choices=("join", "groupby", "sort", "map", "pipeline"))
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out", default="bench.csv")
    _add_common(b, parallelism_list=True)
    b.set_defaults(fn=_cmd_bench)

    q = sub.add_parser("pipeline", help="verify then time the join->groupby->sort->add_scalar pipeline")
    q.add_argument("--repeats", type=int, default=3)
    q.add_argument("--out", default="pipeline.csv")
    _add_common(q, parallelism_list=True)
    q.set_defaults(fn=_cmd_pipeline)

    r = sub.add_parser("report", help="summarize a bench CSV (median wall, speedup, comm fraction)")
    r.add_argument("csv")
    r.add_argument("--out", default=None, help="also write the markdown table here")
    r.add_argument("--plot-data", default=None, help="write plot-ready aggregate CSV here")
    r.set_defaults(fn=_cmd_report)

    z = sub.add_parser("rendezvous", help="run the bootstrap/store key-value service")
    z.add_argument("--host", default="127.0.0.1")
    z.add_argument("--port", type=int, default=0)
    z.set_defaults(fn=_cmd_rendezvous)

    w = sub.add_parser("worker", help="TCP-backend rank entry point (reads BSPF_* env vars)")
    w.set_defaults(fn=_cmd_worker)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except EngineError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
