import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rawdb.errors import RawDbError
from rawdb.kernels import hash64, hash64_many
from rawdb.metadata import HllSketch


def sketch_of(values, p=12):
    sk = HllSketch(p)
    for v in values:
        sk.insert(v)
    return sk


def test_empty_sketch_estimates_zero():
    assert HllSketch(12).estimate() == 0.0


def test_merge_idempotent():
    a = sketch_of([str(i).encode() for i in range(1000)])
    assert a.merge(a) == a


def test_merge_precision_mismatch():
    with pytest.raises(RawDbError):
        HllSketch(12).merge(HllSketch(11))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.binary(min_size=0, max_size=12), max_size=200),
    st.lists(st.binary(min_size=0, max_size=12), max_size=200),
)
def test_merge_is_union(xs, ys):
    merged = sketch_of(xs, 10).merge(sketch_of(ys, 10))
    assert merged == sketch_of(xs + ys, 10)
    # commutative
    assert merged == sketch_of(ys, 10).merge(sketch_of(xs, 10))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.binary(min_size=0, max_size=8), max_size=100), st.randoms())
def test_estimate_invariant_under_reorder_and_duplication(xs, rnd):
    dup = xs + xs[: len(xs) // 2]
    rnd.shuffle(dup)
    assert sketch_of(dup, 10) == sketch_of(xs, 10)


def test_hundred_thousand_distinct_within_5pct():
    rng = np.random.default_rng(42)
    vals = rng.integers(0, 2**62, size=100_000, dtype=np.int64)
    distinct = len(set(vals.tolist()))
    sk = HllSketch(12)
    sk.insert_hashes(hash64_many(*_pad([str(v).encode() for v in vals])))
    assert abs(sk.estimate() - distinct) / distinct < 0.05


def _pad(values):
    w = max(len(v) for v in values)
    mat = np.zeros((len(values), w), dtype=np.uint8)
    lens = np.zeros(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        mat[i, : len(v)] = np.frombuffer(v, np.uint8)
        lens[i] = len(v)
    return mat, lens


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=0, max_size=40))
def test_vector_hash_matches_scalar(data):
    mat, lens = _pad([data]) if data else (np.zeros((1, 1), np.uint8), np.zeros(1, np.int64))
    assert int(hash64_many(mat, lens)[0]) == hash64(data)


def test_scalar_and_bulk_insert_agree():
    vals = [str(i).encode() for i in range(5000)]
    a = sketch_of(vals)
    b = HllSketch(12)
    b.insert_hashes(hash64_many(*_pad(vals)))
    assert a == b


@pytest.mark.parametrize("p", [4, 8, 12, 16])
def test_precisions_accept_inserts(p):
    sk = HllSketch(p)
    for i in range(100):
        sk.insert(str(i).encode())
    assert sk.estimate() > 50


def test_small_range_linear_counting():
    sk = sketch_of([str(i).encode() for i in range(10)])
    assert abs(sk.estimate() - 10) < 1.0
