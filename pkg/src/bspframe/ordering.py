"""Row ordering and equality codes.

Every key-based kernel reduces its key columns to dense int64 codes first:
equal values share a code, codes preserve the documented per-domain total
order, and nulls always receive the largest code so they land last under
either sort direction. Factorizing columns from two tables jointly gives
codes that are comparable across both, which is what join, range
partitioning, and merge need. All hot paths stay inside numpy.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .errors import DomainMismatch
from .table import Column, Domain

__all__ = [
    "joint_codes",
    "composite_codes",
    "sort_order",
    "group_rows",
    "hash_values",
]

_SIGN = np.uint64(0x8000000000000000)


def _float_sortable(data: np.ndarray) -> np.ndarray:
    # Canonical form first: one NaN bit pattern, -0.0 folded into +0.0.
    x = np.where(np.isnan(data), np.float64("nan"), data)
    x = np.where(x == 0.0, np.float64(0.0), x)
    u = x.view(np.uint64)
    neg = u >= _SIGN
    return np.where(neg, ~u, u | _SIGN)


def _canonical_values(col: Column) -> np.ndarray:
    """An array whose sort order and equality match the column's values."""
    if col.domain is Domain.INT64:
        return col.data
    if col.domain is Domain.FLOAT64:
        return _float_sortable(col.data)
    if col.domain is Domain.BOOLEAN:
        return col.data
    raw = col.data.tobytes()
    offs = col.offsets.tolist()
    return np.array(
        [raw[offs[i]:offs[i + 1]].decode("utf-8") for i in range(len(col))],
        dtype=object,
    )


def joint_codes(cols: Sequence[Column], descending: bool = False) -> list[np.ndarray]:
    """Factorize same-domain columns jointly into dense order codes.

    Returns one int64 array per input column. Equal values (across all
    inputs) share a code; codes ascend with the value order, or descend
    when ``descending``. Nulls always get the largest code.
    """
    domains = {c.domain for c in cols}
    if len(domains) != 1:
        raise DomainMismatch(f"cannot compare columns across domains {domains}")
    lengths = [len(c) for c in cols]
    valid = np.concatenate([c.validity for c in cols])
    values = np.concatenate([_canonical_values(c) for c in cols])
    present = values[valid]
    if len(present):
        uniq, inv = np.unique(present, return_inverse=True)
        k = len(uniq)
    else:
        inv, k = np.zeros(0, dtype=np.int64), 0
    codes = np.full(len(values), k, dtype=np.int64)
    codes[valid] = (k - 1 - inv) if descending else inv
    out, pos = [], 0
    for n in lengths:
        out.append(codes[pos:pos + n])
        pos += n
    return out


def composite_codes(code_cols: Sequence[np.ndarray]) -> np.ndarray:
    """Collapse per-column codes into one order-preserving code per row."""
    comb = np.asarray(code_cols[0], dtype=np.int64)
    for c in code_cols[1:]:
        n = len(comb)
        if n == 0:
            break
        order = np.lexsort((c, comb))
        a, b = comb[order], c[order]
        boundary = np.empty(n, dtype=np.bool_)
        boundary[0] = True
        boundary[1:] = (a[1:] != a[:-1]) | (b[1:] != b[:-1])
        ranks = np.cumsum(boundary) - 1
        nxt = np.empty(n, dtype=np.int64)
        nxt[order] = ranks
        comb = nxt
    return comb


def sort_order(cols: Sequence[Column], ascending: Sequence[bool] | None = None) -> np.ndarray:
    """Stable lexicographic permutation over ``cols`` (first column primary)."""
    if ascending is None:
        ascending = [True] * len(cols)
    keys = [joint_codes([c], descending=not asc)[0] for c, asc in zip(cols, ascending)]
    return np.lexsort(tuple(reversed(keys)))


def group_rows(key_cols: Sequence[Column]) -> tuple[np.ndarray, np.ndarray]:
    """Group rows by key tuple.

    Returns ``(group_of_row, representatives)`` where groups are numbered by
    first occurrence and ``representatives[g]`` is the first row of group g.
    """
    n = len(key_cols[0])
    comp = composite_codes([joint_codes([c])[0] for c in key_cols])
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.argsort(comp, kind="stable")
    sorted_comp = comp[order]
    boundary = np.empty(n, dtype=np.bool_)
    boundary[0] = True
    boundary[1:] = sorted_comp[1:] != sorted_comp[:-1]
    run_id = np.cumsum(boundary) - 1  # group id in code order
    reps_code_order = order[boundary]  # first input row of each run (stable sort)
    first_rank = np.empty(len(reps_code_order), dtype=np.int64)
    first_rank[np.argsort(reps_code_order, kind="stable")] = np.arange(len(reps_code_order))
    group_of_row = np.empty(n, dtype=np.int64)
    group_of_row[order] = first_rank[run_id]
    representatives = reps_code_order[np.argsort(first_rank, kind="stable")]
    return group_of_row, representatives


# -- hashing ------------------------------------------------------------------

_DOMAIN_TAG = {
    Domain.INT64: np.uint64(0x01C8_37A6_1D3B_92E1),
    Domain.FLOAT64: np.uint64(0x9B1F_0D4C_22E7_5A83),
    Domain.UTF8: np.uint64(0x5E44_C1A9_7F02_6B3D),
    Domain.BOOLEAN: np.uint64(0xA773_58F0_3C91_E40B),
}
_NULL_HASH = np.uint64(0xB4B1_35C1_6F9A_2D77)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _hash_column(col: Column) -> np.ndarray:
    tag = _DOMAIN_TAG[col.domain]
    if col.domain is Domain.UTF8:
        out = np.empty(len(col), dtype=np.uint64)
        raw = col.data.tobytes()
        offs = col.offsets.tolist()
        for i in range(len(col)):
            digest = hashlib.blake2b(raw[offs[i]:offs[i + 1]], digest_size=8).digest()
            out[i] = int.from_bytes(digest, "little")
        out = _splitmix(out ^ tag)
    else:
        if col.domain is Domain.FLOAT64:
            u = _float_sortable(col.data)
        elif col.domain is Domain.BOOLEAN:
            u = col.data.astype(np.uint64)
        else:
            u = col.data.view(np.uint64)
        out = _splitmix(u ^ tag)
    return np.where(col.validity, out, _NULL_HASH)


def hash_values(key_cols: Sequence[Column]) -> np.ndarray:
    """Deterministic 64-bit hash per row over the given key columns.

    Depends only on domain-tagged values (and nullness): identical key rows
    hash identically in any process, on any backend, in any run.
    """
    n = len(key_cols[0])
    h = np.full(n, np.uint64(0x243F6A8885A308D3), dtype=np.uint64)  # fixed seed
    for col in key_cols:
        h = _splitmix(h ^ _hash_column(col))
    return h
