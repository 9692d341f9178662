"""Synthetic data with controlled key cardinality.

The key column draws uniformly with replacement from ``ceil(c * N)``
distinct values, so a cardinality of 0.9 makes ~90% of keys unique (the
worst case for key-based operators) while 0.001 makes keys duplicate-
heavy. Generation is deterministic in the seed, down to the output bytes.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .table import Column, Domain, Schema, Table, slice_rows
from .tableio import write_csv, write_table_file

__all__ = ["GenSpec", "generate_table", "generate", "shard_paths"]


@dataclass(frozen=True)
class GenSpec:
    rows: int
    cardinality: float = 0.9
    columns: int = 2  # one key column plus value columns, all int64
    seed: int = 0

    def __post_init__(self):
        if self.rows < 0:
            raise ValueError("rows must be >= 0")
        if not 0 < self.cardinality <= 1:
            raise ValueError("cardinality must be in (0, 1]")
        if self.columns < 1:
            raise ValueError("need at least the key column")

    @property
    def distinct_keys(self) -> int:
        return max(1, math.ceil(self.cardinality * self.rows))


def generate_table(spec: GenSpec) -> Table:
    """Uniform int64 table: key column ``k`` plus value columns ``v0``, ``v1``, ..."""
    rng = np.random.default_rng(spec.seed)
    names = ["k"] + [f"v{i}" for i in range(spec.columns - 1)]
    schema = Schema((Domain.INT64,) * spec.columns, tuple(names))
    n = spec.rows
    validity = np.ones(n, dtype=np.bool_)
    cols = [Column(Domain.INT64, rng.integers(0, spec.distinct_keys, n, dtype=np.int64),
                   validity)]
    for _ in range(spec.columns - 1):
        # value range keeps int64 sums exact even for duplicate-heavy groups
        cols.append(Column(Domain.INT64,
                           rng.integers(0, 2**32, n, dtype=np.int64), validity))
    return Table(schema, tuple(cols), n)


def shard_paths(path: str, shards: int) -> list[str]:
    stem, ext = os.path.splitext(path)
    return [f"{stem}.r{r}of{shards}{ext}" for r in range(shards)]


def _write(t: Table, path: str) -> None:
    if path.endswith(".csv"):
        write_csv(t, path)
    else:
        write_table_file(t, path)


def generate(spec: GenSpec, path: str, shards: int | None = None) -> list[str]:
    """Write the generated table to ``path``; with ``shards``, write one
    contiguous near-even chunk per target rank (longer chunks first).

    Returns the written paths. Format follows the extension (.csv or .bspf).
    """
    t = generate_table(spec)
    if shards is None:
        _write(t, path)
        return [path]
    paths = shard_paths(path, shards)
    base, rem = divmod(t.num_rows, shards)
    start = 0
    for r, p in enumerate(paths):
        length = base + (1 if r < rem else 0)
        _write(slice_rows(t, start, length), p)
        start += length
    return paths
