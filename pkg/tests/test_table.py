import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bspframe as bf
from bspframe import Domain, Schema
from bspframe.errors import DomainMismatch, LengthMismatch, OutOfBounds, SchemaMismatch

from .support import assert_tables_equal, random_table, rows_of

INT_S = Schema((Domain.INT64,), ("k",))


def int_table(values):
    return bf.build_table(INT_S, [values])


class TestBuildTable:
    def test_basic(self):
        t = int_table([1, 2, 3])
        assert t.num_rows == 3
        assert rows_of(t) == [(1,), (2,), (3,)]

    def test_empty(self):
        assert int_table([]).num_rows == 0

    def test_length_mismatch(self):
        s = Schema((Domain.INT64, Domain.UTF8), ("k", "v"))
        with pytest.raises(LengthMismatch):
            bf.build_table(s, [[1], ["a", "b"]])

    @pytest.mark.parametrize("domain,bad", [
        (Domain.INT64, "x"),
        (Domain.INT64, 1.5),
        (Domain.INT64, True),
        (Domain.INT64, 2**63),
        (Domain.UTF8, 7),
        (Domain.BOOLEAN, 1),
        (Domain.FLOAT64, "nope"),
    ])
    def test_domain_mismatch(self, domain, bad):
        with pytest.raises(DomainMismatch):
            bf.build_table(Schema((domain,), ("c",)), [[bad]])

    def test_schema_invariants(self):
        with pytest.raises(SchemaMismatch):
            Schema((), ())
        with pytest.raises(SchemaMismatch):
            Schema((Domain.INT64, Domain.INT64), ("a", "a"))
        with pytest.raises(SchemaMismatch):
            Schema((Domain.INT64,), ("",))

    def test_random_tables_validate(self, rng):
        for _ in range(100):
            bf.validate_table(random_table(rng))


class TestSlice:
    def test_middle(self):
        assert rows_of(bf.slice_rows(int_table([1, 2, 3, 4]), 1, 2)) == [(2,), (3,)]

    def test_identity(self):
        t = int_table([5, 6, 7])
        assert_tables_equal(bf.slice_rows(t, 0, t.num_rows), t)

    def test_boundary_empty(self):
        t = int_table([1, 2])
        s = bf.slice_rows(t, t.num_rows, 0)
        assert s.num_rows == 0
        assert s.schema == t.schema

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            bf.slice_rows(int_table([1]), 1, 1)

    def test_random_slices_match_rows(self, rng):
        for _ in range(50):
            t = random_table(rng)
            if t.num_rows == 0:
                continue
            start = int(rng.integers(0, t.num_rows))
            length = int(rng.integers(0, t.num_rows - start + 1))
            s = bf.slice_rows(t, start, length)
            bf.validate_table(s)
            assert rows_of(s) == rows_of(t)[start:start + length]


class TestTake:
    def test_basic(self):
        assert rows_of(bf.take(int_table([10, 20, 30]), [2, 0])) == [(30,), (10,)]

    def test_empty(self):
        assert bf.take(int_table([1, 2]), []).num_rows == 0

    def test_duplicates(self):
        t = bf.build_table(Schema((Domain.UTF8,), ("s",)), [["x", "y"]])
        assert rows_of(bf.take(t, [0, 0, 0])) == [("x",)] * 3

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            bf.take(int_table([1]), [1])
        with pytest.raises(OutOfBounds):
            bf.take(int_table([1]), [-1])

    def test_identity_permutation(self, rng):
        for _ in range(30):
            t = random_table(rng)
            assert_tables_equal(bf.take(t, np.arange(t.num_rows)), t)

    def test_random_gathers_match_rows(self, rng):
        for _ in range(50):
            t = random_table(rng, min_rows=1)
            idx = rng.integers(0, t.num_rows, size=int(rng.integers(0, 40)))
            s = bf.take(t, idx)
            bf.validate_table(s)
            assert rows_of(s) == [rows_of(t)[i] for i in idx]


class TestConcat:
    def test_basic(self):
        got = bf.concat([int_table([1]), int_table([2, 3])])
        assert rows_of(got) == [(1,), (2,), (3,)]

    def test_identity(self):
        t = int_table([4, 5])
        assert_tables_equal(bf.concat([t]), t)

    def test_schema_mismatch(self):
        a = int_table([1])
        b = bf.build_table(Schema((Domain.FLOAT64,), ("k",)), [[1.0]])
        with pytest.raises(SchemaMismatch):
            bf.concat([a, b])

    def test_empty_needs_schema(self):
        with pytest.raises(SchemaMismatch):
            bf.concat([])
        assert bf.concat([], schema=INT_S).num_rows == 0

    def test_split_then_concat_is_identity(self, rng):
        for _ in range(50):
            t = random_table(rng)
            cut = int(rng.integers(0, t.num_rows + 1))
            parts = [bf.slice_rows(t, 0, cut), bf.slice_rows(t, cut, t.num_rows - cut)]
            back = bf.concat(parts)
            bf.validate_table(back)
            assert_tables_equal(back, t)


class TestCanonicalize:
    def test_sorts(self):
        assert rows_of(bf.canonicalize(int_table([3, 1, 2]))) == [(1,), (2,), (3,)]

    def test_idempotent(self, rng):
        for _ in range(30):
            t = random_table(rng)
            c1 = bf.canonicalize(t)
            assert_tables_equal(bf.canonicalize(c1), c1)

    def test_permutation_invariance(self, rng):
        for _ in range(60):
            t = random_table(rng, max_rows=6)
            perm = rng.permutation(t.num_rows)
            assert_tables_equal(bf.canonicalize(bf.take(t, perm)), bf.canonicalize(t))

    def test_exhaustive_small_permutations(self):
        s = Schema((Domain.INT64, Domain.UTF8), ("k", "s"))
        t = bf.build_table(s, [[2, None, 2, 1], ["b", "a", None, "a"]])
        base = bf.canonicalize(t)
        for perm in itertools.permutations(range(4)):
            assert_tables_equal(bf.canonicalize(bf.take(t, list(perm))), base)

    def test_null_and_nan_order(self):
        s = Schema((Domain.FLOAT64,), ("f",))
        t = bf.build_table(s, [[float("nan"), None, 1.0, float("-inf"), float("inf"), -0.0]])
        got = rows_of(bf.canonicalize(t))
        assert got[0] == (float("-inf"),)
        assert got[1] == (-0.0,)
        assert got[2] == (1.0,)
        assert got[3] == (float("inf"),)
        assert np.isnan(got[4][0])
        assert got[5] == (None,)


@settings(max_examples=60, deadline=None)
@given(values=st.lists(st.one_of(st.none(), st.integers(-2**63, 2**63 - 1))))
def test_int_column_roundtrips_any_values(values):
    t = int_table(values)
    bf.validate_table(t)
    assert rows_of(t) == [(v,) for v in values]
