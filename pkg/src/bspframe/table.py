"""Immutable columnar tables.

A table is a schema (domains + column names) plus one buffer set per column:
a data buffer, a validity mask, and a byte-offsets buffer for variable-width
text columns. Tables are immutable after construction; every operation here
returns a new table and never mutates its inputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainMismatch, LengthMismatch, OutOfBounds, SchemaMismatch

__all__ = [
    "Domain",
    "Schema",
    "Column",
    "Table",
    "build_table",
    "empty_table",
    "slice_rows",
    "take",
    "concat",
    "canonicalize",
    "select_columns",
    "validate_table",
    "column_values",
    "table_to_rows",
    "tables_equal",
]

_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1


class Domain(enum.Enum):
    """Value domains a column may hold."""

    INT64 = "int64"
    FLOAT64 = "float64"
    UTF8 = "utf8"
    BOOLEAN = "boolean"

    @property
    def fixed_width(self) -> bool:
        return self is not Domain.UTF8

    @property
    def numeric(self) -> bool:
        return self in (Domain.INT64, Domain.FLOAT64)


_FIXED_DTYPES = {
    Domain.INT64: np.dtype("<i8"),
    Domain.FLOAT64: np.dtype("<f8"),
    Domain.BOOLEAN: np.dtype(np.bool_),
}


@dataclass(frozen=True)
class Schema:
    """Ordered column domains and their distinct labels."""

    domains: tuple[Domain, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.domains) != len(self.names):
            raise SchemaMismatch("domains and names differ in length")
        if not self.domains:
            raise SchemaMismatch("a schema needs at least one column")
        if any(not n for n in self.names):
            raise SchemaMismatch("column names must be nonempty")
        if len(set(self.names)) != len(self.names):
            raise SchemaMismatch(f"duplicate column names in {self.names}")

    @property
    def ncols(self) -> int:
        return len(self.domains)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaMismatch(f"no column named {name!r}") from None


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        try:
            arr.flags.writeable = False
        except ValueError:
            arr = arr.copy()
            arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Column:
    """One column: data buffer, validity mask, optional text offsets.

    Fixed-width domains use ``data`` directly (int64 / float64 / bool, one
    slot per row). Utf8 stores UTF-8 bytes in ``data`` with ``offsets`` of
    length N+1 delimiting each value. ``validity[i]`` is True when row i is
    present; null slots hold zeroed data.
    """

    domain: Domain
    data: np.ndarray
    validity: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(self.data)))
        object.__setattr__(self, "validity", _freeze(np.ascontiguousarray(self.validity)))
        if self.offsets is not None:
            object.__setattr__(self, "offsets", _freeze(np.ascontiguousarray(self.offsets)))

    def __len__(self) -> int:
        if self.domain.fixed_width:
            return len(self.data)
        return len(self.offsets) - 1


def _null_column(domain: Domain, nrows: int) -> Column:
    validity = np.zeros(nrows, dtype=np.bool_)
    if domain.fixed_width:
        return Column(domain, np.zeros(nrows, dtype=_FIXED_DTYPES[domain]), validity)
    return Column(domain, np.zeros(0, dtype=np.uint8), validity,
                  np.zeros(nrows + 1, dtype=np.int64))


@dataclass(frozen=True)
class Table:
    """An immutable table: schema, columns, and row count."""

    schema: Schema
    columns: tuple[Column, ...]
    num_rows: int = field(default=-1)

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if len(self.columns) != self.schema.ncols:
            raise SchemaMismatch("column count does not match schema")
        n = len(self.columns[0])
        if self.num_rows == -1:
            object.__setattr__(self, "num_rows", n)
        for col, dom in zip(self.columns, self.schema.domains):
            if col.domain is not dom:
                raise DomainMismatch(f"column domain {col.domain} != schema {dom}")
            if len(col) != self.num_rows:
                raise LengthMismatch("columns differ in length")

    def column(self, key: int | str) -> Column:
        if isinstance(key, str):
            key = self.schema.index_of(key)
        return self.columns[key]


def _column_from_values(domain: Domain, values: Sequence) -> Column:
    n = len(values)
    validity = np.fromiter((v is not None for v in values), dtype=np.bool_, count=n)
    if domain is Domain.UTF8:
        chunks = []
        offsets = np.zeros(n + 1, dtype=np.int64)
        pos = 0
        for i, v in enumerate(values):
            if v is not None:
                if not isinstance(v, str):
                    raise DomainMismatch(f"expected str, got {type(v).__name__}")
                b = v.encode("utf-8")
                chunks.append(b)
                pos += len(b)
            offsets[i + 1] = pos
        data = np.frombuffer(b"".join(chunks), dtype=np.uint8) if chunks else np.zeros(0, np.uint8)
        return Column(domain, data, validity, offsets)

    data = np.zeros(n, dtype=_FIXED_DTYPES[domain])
    for i, v in enumerate(values):
        if v is None:
            continue
        if domain is Domain.INT64:
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise DomainMismatch(f"expected int, got {type(v).__name__}")
            if not _INT64_MIN <= int(v) <= _INT64_MAX:
                raise DomainMismatch(f"{v} out of int64 range")
            data[i] = int(v)
        elif domain is Domain.FLOAT64:
            if isinstance(v, bool) or not isinstance(v, (int, float, np.integer, np.floating)):
                raise DomainMismatch(f"expected float, got {type(v).__name__}")
            data[i] = float(v)
        else:  # BOOLEAN
            if not isinstance(v, (bool, np.bool_)):
                raise DomainMismatch(f"expected bool, got {type(v).__name__}")
            data[i] = bool(v)
    return Column(domain, data, validity)


def build_table(schema: Schema, column_value_lists: Sequence[Sequence]) -> Table:
    """Build a table from per-column value sequences; ``None`` marks a null."""
    if len(column_value_lists) != schema.ncols:
        raise LengthMismatch("one value sequence per schema column required")
    lengths = {len(vs) for vs in column_value_lists}
    if len(lengths) > 1:
        raise LengthMismatch(f"value sequences differ in length: {sorted(lengths)}")
    cols = [_column_from_values(dom, vs) for dom, vs in zip(schema.domains, column_value_lists)]
    return Table(schema, tuple(cols))


def empty_table(schema: Schema) -> Table:
    return Table(schema, tuple(_null_column(d, 0) for d in schema.domains), 0)


def _slice_column(col: Column, start: int, length: int) -> Column:
    validity = col.validity[start:start + length]
    if col.domain.fixed_width:
        return Column(col.domain, col.data[start:start + length], validity)
    offs = col.offsets[start:start + length + 1]
    base = int(offs[0]) if len(offs) else 0
    data = col.data[base:int(offs[-1])] if length else np.zeros(0, np.uint8)
    return Column(col.domain, data, validity, offs - base)


def slice_rows(t: Table, start: int, length: int) -> Table:
    """Rows ``start .. start+length`` of ``t`` as a new table."""
    if start < 0 or length < 0 or start + length > t.num_rows:
        raise OutOfBounds(f"slice [{start}, {start + length}) of {t.num_rows} rows")
    return Table(t.schema, tuple(_slice_column(c, start, length) for c in t.columns), length)


def gather_column(col: Column, indices: np.ndarray, missing: np.ndarray | None = None) -> Column:
    """Gather rows of ``col`` at ``indices``; rows where ``missing`` is True become null.

    ``indices`` must already be clipped into range wherever ``missing`` is set.
    """
    indices = np.asarray(indices, dtype=np.int64)
    validity = col.validity[indices]
    if missing is not None:
        validity = validity & ~missing
    if col.domain.fixed_width:
        data = col.data[indices]
        if missing is not None and missing.any():
            data = data.copy()
            data[missing] = 0
        return Column(col.domain, data, validity)

    lengths = (col.offsets[1:] - col.offsets[:-1])[indices]
    if missing is not None and missing.any():
        lengths = lengths.copy()
        lengths[missing] = 0
    offsets = np.zeros(len(indices) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    total = int(offsets[-1])
    if total:
        starts = col.offsets[:-1][indices]
        pos = np.repeat(starts - (offsets[:-1]), lengths) + np.arange(total, dtype=np.int64)
        data = col.data[pos]
    else:
        data = np.zeros(0, np.uint8)
    return Column(col.domain, data, validity, offsets)


def take(t: Table, indices) -> Table:
    """Gather rows of ``t`` at ``indices`` (duplicates allowed)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= t.num_rows):
        raise OutOfBounds(f"take index out of range for {t.num_rows} rows")
    return Table(t.schema, tuple(gather_column(c, indices) for c in t.columns), len(indices))


def concat(parts: Sequence[Table], schema: Schema | None = None) -> Table:
    """Concatenate tables sharing one schema, in part order."""
    parts = list(parts)
    if not parts:
        if schema is None:
            raise SchemaMismatch("concat of zero tables requires an explicit schema")
        return empty_table(schema)
    schema = parts[0].schema if schema is None else schema
    for p in parts:
        if p.schema != schema:
            raise SchemaMismatch(f"schema {p.schema} != {schema}")
    if len(parts) == 1:
        return parts[0]
    total = sum(p.num_rows for p in parts)
    cols = []
    for ci, dom in enumerate(schema.domains):
        validity = np.concatenate([p.columns[ci].validity for p in parts])
        data = np.concatenate([p.columns[ci].data for p in parts])
        if dom.fixed_width:
            cols.append(Column(dom, data, validity))
        else:
            offsets = np.zeros(total + 1, dtype=np.int64)
            row = 0
            base = 0
            for p in parts:
                c = p.columns[ci]
                offsets[row + 1:row + p.num_rows + 1] = c.offsets[1:] + base
                row += p.num_rows
                base += int(c.offsets[-1])
            cols.append(Column(dom, data, validity, offsets))
    return Table(schema, tuple(cols), total)


def select_columns(t: Table, indices: Sequence[int]) -> Table:
    """Project ``t`` onto the given column indices, in that order."""
    schema = Schema(tuple(t.schema.domains[i] for i in indices),
                    tuple(t.schema.names[i] for i in indices))
    return Table(schema, tuple(t.columns[i] for i in indices), t.num_rows)


def canonicalize(t: Table) -> Table:
    """Sort rows lexicographically over all columns, nulls last.

    The per-domain order is: int64/float64 ascending (float64 uses the
    total order -inf < finite < +inf < NaN, with -0.0 == 0.0), utf8 by
    codepoint sequence, booleans False < True. Any null sorts after every
    present value. Permutations of the same rows canonicalize identically.
    """
    from .ordering import sort_order

    order = sort_order(t.columns)
    return take(t, order)


def validate_table(t: Table) -> None:
    """Check every structural invariant; raises on violation."""
    assert len(t.columns) == t.schema.ncols
    for col, dom in zip(t.columns, t.schema.domains):
        assert col.domain is dom
        assert len(col) == t.num_rows
        assert col.validity.dtype == np.bool_ and len(col.validity) == t.num_rows
        if dom.fixed_width:
            assert col.data.dtype == _FIXED_DTYPES[dom]
            assert len(col.data) == t.num_rows
            assert col.offsets is None
        else:
            assert col.data.dtype == np.uint8
            assert col.offsets is not None and col.offsets.dtype == np.int64
            assert len(col.offsets) == t.num_rows + 1
            assert int(col.offsets[0]) == 0
            assert int(col.offsets[-1]) == len(col.data)
            assert (col.offsets[1:] >= col.offsets[:-1]).all()


def column_values(col: Column) -> list:
    """Column contents as a Python list with ``None`` for nulls."""
    out: list = []
    if col.domain.fixed_width:
        for v, ok in zip(col.data.tolist(), col.validity.tolist()):
            out.append(v if ok else None)
        return out
    raw = col.data.tobytes()
    offs = col.offsets.tolist()
    for i, ok in enumerate(col.validity.tolist()):
        out.append(raw[offs[i]:offs[i + 1]].decode("utf-8") if ok else None)
    return out


def table_to_rows(t: Table) -> list[tuple]:
    """All rows as tuples of Python values (None for nulls)."""
    cols = [column_values(c) for c in t.columns]
    return list(zip(*cols)) if cols else []


def tables_equal(a: Table, b: Table, float_rtol: float = 0.0) -> bool:
    """Value equality: same schema, length, and cell values (null == null).

    ``float_rtol`` relaxes float64 comparison to a relative tolerance;
    NaN equals NaN in either mode.
    """
    if a.schema != b.schema or a.num_rows != b.num_rows:
        return False
    for ca, cb in zip(a.columns, b.columns):
        if not np.array_equal(ca.validity, cb.validity):
            return False
        ok = ca.validity
        if ca.domain is Domain.UTF8:
            la = ca.offsets[1:] - ca.offsets[:-1]
            lb = cb.offsets[1:] - cb.offsets[:-1]
            if not np.array_equal(la[ok], lb[ok]):
                return False
            if not all(
                ca.data[ca.offsets[i]:ca.offsets[i + 1]].tobytes()
                == cb.data[cb.offsets[i]:cb.offsets[i + 1]].tobytes()
                for i in np.flatnonzero(ok)
            ):
                return False
        elif ca.domain is Domain.FLOAT64:
            va, vb = ca.data[ok], cb.data[ok]
            both_nan = np.isnan(va) & np.isnan(vb)
            if float_rtol:
                close = np.isclose(va, vb, rtol=float_rtol, atol=0.0, equal_nan=True)
                if not (close | both_nan).all():
                    return False
            elif not ((va == vb) | both_nan).all():
                return False
        else:
            if not np.array_equal(ca.data[ok], cb.data[ok]):
                return False
    return True
