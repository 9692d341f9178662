"""Table serialization: the native binary format and CSV.

Binary layout (all integers little-endian):

    magic "BSPF", u16 version=1, u32 column count, then per column:
    u8 domain tag, u32 name length + UTF-8 name, u64 row count,
    u64 validity byte length + packed validity bits (LSB-first),
    u64 offsets byte length + offsets (0 for fixed-width; int64 each),
    u64 data byte length + data bytes.

The same bytes travel over the TCP transport and live in ``.bspf`` files,
so the layout is bit-exact: serializing a value-equal table always yields
identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptPayload, DomainMismatch, MalformedCsv
from .table import Column, Domain, Schema, Table, build_table

__all__ = [
    "serialize_table",
    "deserialize_table",
    "write_table_file",
    "read_table_file",
    "write_csv",
    "read_csv",
    "schema_digest",
]

MAGIC = b"BSPF"
VERSION = 1

_DOMAIN_TAGS = {Domain.INT64: 0, Domain.FLOAT64: 1, Domain.UTF8: 2, Domain.BOOLEAN: 3}
_TAG_DOMAINS = {v: k for k, v in _DOMAIN_TAGS.items()}


def serialize_table(t: Table) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", VERSION, t.schema.ncols))
    for col, name in zip(t.columns, t.schema.names):
        name_b = name.encode("utf-8")
        out.write(struct.pack("<B", _DOMAIN_TAGS[col.domain]))
        out.write(struct.pack("<I", len(name_b)))
        out.write(name_b)
        out.write(struct.pack("<Q", t.num_rows))
        validity = np.packbits(col.validity, bitorder="little").tobytes()
        out.write(struct.pack("<Q", len(validity)))
        out.write(validity)
        if col.domain.fixed_width:
            out.write(struct.pack("<Q", 0))
            data = col.data.tobytes()
        else:
            offs = col.offsets.astype("<i8", copy=False).tobytes()
            out.write(struct.pack("<Q", len(offs)))
            out.write(offs)
            data = col.data.tobytes()
        out.write(struct.pack("<Q", len(data)))
        out.write(data)
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptPayload(f"payload truncated at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def deserialize_table(buf: bytes) -> Table:
    r = _Reader(bytes(buf))
    if r.read(4) != MAGIC:
        raise CorruptPayload("bad magic")
    version, ncols = r.unpack("<HI")
    if version != VERSION:
        raise CorruptPayload(f"unsupported version {version}")
    if ncols == 0:
        raise CorruptPayload("zero columns")
    domains, names, cols = [], [], []
    nrows = None
    for _ in range(ncols):
        (tag,) = r.unpack("<B")
        if tag not in _TAG_DOMAINS:
            raise CorruptPayload(f"unknown domain tag {tag}")
        domain = _TAG_DOMAINS[tag]
        (name_len,) = r.unpack("<I")
        try:
            name = r.read(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptPayload("column name is not UTF-8") from e
        (n,) = r.unpack("<Q")
        if nrows is None:
            nrows = n
        elif n != nrows:
            raise CorruptPayload("columns disagree on row count")
        (vlen,) = r.unpack("<Q")
        if vlen != (n + 7) // 8:
            raise CorruptPayload("validity byte length mismatch")
        vbits = np.frombuffer(r.read(vlen), dtype=np.uint8)
        validity = np.unpackbits(vbits, count=n, bitorder="little").astype(np.bool_)
        (olen,) = r.unpack("<Q")
        offsets = None
        if domain.fixed_width:
            if olen != 0:
                raise CorruptPayload("fixed-width column with offsets")
        else:
            if olen != (n + 1) * 8:
                raise CorruptPayload("offsets byte length mismatch")
            offsets = np.frombuffer(r.read(olen), dtype="<i8")
            if offsets[0] != 0 or (offsets[1:] < offsets[:-1]).any():
                raise CorruptPayload("offsets are not monotone from zero")
        (dlen,) = r.unpack("<Q")
        data_bytes = r.read(dlen)
        if domain is Domain.INT64:
            if dlen != n * 8:
                raise CorruptPayload("int64 data length mismatch")
            data = np.frombuffer(data_bytes, dtype="<i8")
        elif domain is Domain.FLOAT64:
            if dlen != n * 8:
                raise CorruptPayload("float64 data length mismatch")
            data = np.frombuffer(data_bytes, dtype="<f8")
        elif domain is Domain.BOOLEAN:
            if dlen != n:
                raise CorruptPayload("boolean data length mismatch")
            raw = np.frombuffer(data_bytes, dtype=np.uint8)
            if (raw > 1).any():
                raise CorruptPayload("boolean byte out of range")
            data = raw.view(np.bool_)
        else:
            if int(offsets[-1]) != dlen:
                raise CorruptPayload("utf8 data length does not match offsets")
            data = np.frombuffer(data_bytes, dtype=np.uint8)
        domains.append(domain)
        names.append(name)
        cols.append(Column(domain, data, validity, offsets))
    if r.pos != len(r.buf):
        raise CorruptPayload(f"{len(r.buf) - r.pos} trailing bytes")
    return Table(Schema(tuple(domains), tuple(names)), tuple(cols), nrows)


def write_table_file(t: Table, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_table(t))


def read_table_file(path) -> Table:
    with open(path, "rb") as f:
        return deserialize_table(f.read())


def schema_digest(schema: Schema) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<HI", VERSION, schema.ncols))
    for dom, name in zip(schema.domains, schema.names):
        nb = name.encode("utf-8")
        h.update(struct.pack("<BI", _DOMAIN_TAGS[dom], len(nb)))
        h.update(nb)
    return h.hexdigest()


# -- CSV ------------------------------------------------------------------

def _format_cell(domain: Domain, value) -> str:
    if value is None:
        return ""
    if domain is Domain.BOOLEAN:
        return "true" if value else "false"
    if domain is Domain.FLOAT64:
        return repr(float(value))
    return str(value)


def write_csv(t: Table, path) -> None:
    """Write ``t`` as RFC-4180 CSV with a header row; nulls become empty fields."""
    from .table import column_values

    cols = [column_values(c) for c in t.columns]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(t.schema.names)
        for i in range(t.num_rows):
            w.writerow(_format_cell(d, col[i]) for d, col in zip(t.schema.domains, cols))


def _parse_cell(domain: Domain, text: str):
    if text == "":
        return None
    try:
        if domain is Domain.INT64:
            return int(text)
        if domain is Domain.FLOAT64:
            return float(text)
        if domain is Domain.BOOLEAN:
            low = text.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ValueError(text)
        return text
    except ValueError as e:
        raise DomainMismatch(f"cannot parse {text!r} as {domain.value}") from e


def read_csv(path, domains: Sequence[Domain]) -> Table:
    """Read a headered CSV; empty fields are nulls; column names come from the header."""
    with open(path, "r", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise MalformedCsv("missing header row")
    names = tuple(rows[0])
    if len(names) != len(domains):
        raise MalformedCsv(f"header has {len(names)} columns, expected {len(domains)}")
    values: list[list] = [[] for _ in names]
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(names):
            raise MalformedCsv(f"line {lineno}: {len(row)} fields, expected {len(names)}")
        for ci, text in enumerate(row):
            values[ci].append(_parse_cell(domains[ci], text))
    return build_table(Schema(tuple(domains), names), values)
