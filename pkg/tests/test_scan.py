import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rawdb.errors import MetadataInconsistencyError
from rawdb.metadata import PositionalMap, VerticalIndex
from rawdb.scan import (
    Comparison,
    IncrementalPmCache,
    MetadataCache,
    ScanCounters,
    ScanRequest,
    full_scan,
    index_scan,
    locate_attr,
)

from conftest import parse_table_oracle, tokenize_oracle


def make_pm(block: bytes, arity: int, sampled):
    rows = tokenize_oracle(block)
    return PositionalMap(
        attr_count=arity,
        sampled_attrs=tuple(sampled),
        offsets=np.array(
            [[offs[a] for a in sampled] for _, offs, _ in rows], np.uint32
        ).reshape(len(rows), len(sampled)),
        row_lens=np.array([ln for _, _, ln in rows], np.uint32),
    )


def make_vi(block: bytes, key_attr: int):
    rows = tokenize_oracle(block)
    starts = []
    pos = 0
    keys = []
    for fields, _, ln in rows:
        starts.append(pos)
        keys.append(int(fields[key_attr]))
        pos += ln + 1
    return VerticalIndex(key_attr, "int64", np.array(keys), np.array(starts, np.uint64))


BLOCK = b"10,274,xyz\n5,9000,ab\n777,1,zz\n"


class TestLocateAttr:
    def test_direct_anchor(self):
        assert locate_attr(b"10,274,xyz", 2, {0: 0, 2: 7}) == 7

    def test_forward_from_anchor(self):
        assert locate_attr(b"10,274,xyz", 1, {0: 0, 2: 7}) == 3

    def test_no_anchors_first_attr(self):
        assert locate_attr(b"10,274,xyz", 0, {}) == 0

    def test_backward_when_strictly_nearer(self):
        row = b"a,bb,ccc,dddd,e"
        # anchors at 0 and 4; target 3 is nearer to 4 (distance 1 vs 3)
        assert locate_attr(row, 3, {0: 0, 4: 14}) == 9

    def test_tie_prefers_earlier_anchor(self):
        row = b"a,bb,ccc,dddd,e"
        # target 2: distance 2 from anchor 0, distance 2 from anchor 4
        oracle = tokenize_oracle(row + b"\n")[0][1]
        assert locate_attr(row, 2, {0: 0, 4: 14}) == oracle[2]

    def test_arity_violation(self):
        with pytest.raises(ValueError):
            locate_attr(b"a,b", 5, {}, arity=3)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 14))
    def test_matches_oracle_everywhere(self, seed, arity):
        rng = np.random.default_rng(seed)
        fields = [
            "" if rng.integers(0, 4) == 0 else str(rng.integers(0, 10**6))
            for _ in range(arity)
        ]
        row = ",".join(fields).encode()
        oracle = tokenize_oracle(row + b"\n")[0][1]
        anchor_set = {int(a): oracle[int(a)] for a in rng.choice(arity, size=min(3, arity), replace=False)}
        for target in range(arity):
            assert locate_attr(row, target, anchor_set, arity) == oracle[target]


TYPES3 = ("int64", "int64", "text")


class TestFullScan:
    def req(self, **kw):
        base = dict(table="t", ordinal=0, projection=(0, 1, 2), predicate=(), access="full")
        base.update(kw)
        return ScanRequest(**base)

    @pytest.mark.parametrize("kernel", ["vector", "scalar"])
    @pytest.mark.parametrize("pm_sampled", [None, (), (0, 2), (0, 1, 2)])
    def test_no_predicate_full_projection(self, kernel, pm_sampled):
        pm = make_pm(BLOCK, 3, pm_sampled) if pm_sampled is not None else None
        rows = full_scan(BLOCK, TYPES3, self.req(), pm=pm, kernel=kernel)
        assert rows == parse_table_oracle(BLOCK, TYPES3)

    @pytest.mark.parametrize("kernel", ["vector", "scalar"])
    def test_predicate_filters(self, kernel):
        rows = full_scan(
            BLOCK, TYPES3,
            self.req(projection=(2,), predicate=(Comparison(1, "<", 1000),)),
            kernel=kernel,
        )
        assert rows == [("xyz",), ("zz",)]

    @pytest.mark.parametrize("kernel", ["vector", "scalar"])
    def test_selective_parsing_conversion_count(self, kernel):
        c = ScanCounters()
        full_scan(
            BLOCK, TYPES3,
            self.req(projection=(0,), predicate=(Comparison(1, ">", 100),)),
            counters=c, kernel=kernel,
        )
        assert c.conversions == 2  # qualifying rows only
        assert c.rows_examined == 3
        assert c.rows_emitted == 2

    @pytest.mark.parametrize("kernel", ["vector", "scalar"])
    def test_parse_errors_excluded_and_tallied(self, kernel):
        blk = b"1,2\n1,junk\n3,4\n"
        c = ScanCounters()
        rows = full_scan(
            blk, ("int64", "int64"),
            self.req(projection=(0,), predicate=(Comparison(1, ">", 0),)),
            counters=c, kernel=kernel,
        )
        assert rows == [(1,), (3,)]
        assert c.parse_errors == 1

    @pytest.mark.parametrize("kernel", ["vector", "scalar"])
    def test_limit_stops_early(self, kernel):
        rows = full_scan(BLOCK, TYPES3, self.req(projection=(0,), limit=2), kernel=kernel)
        assert rows == [(10,), (5,)]

    def test_cache_learns_and_second_scan_is_cheaper(self):
        cache = IncrementalPmCache()
        pm = make_pm(BLOCK, 3, (0,))
        req = self.req(projection=(1,))
        c1 = ScanCounters()
        full_scan(BLOCK, TYPES3, req, pm=pm, cache=cache, counters=c1)
        c2 = ScanCounters()
        full_scan(BLOCK, TYPES3, req, pm=pm, cache=cache, counters=c2)
        assert c1.bytes_located > 0
        assert c2.bytes_located == 0
        assert c2.pm_hits > 0 and c2.pm_misses == 0
        assert c1.pm_misses == 3

    def test_cache_soundness_against_oracle(self):
        cache = IncrementalPmCache()
        full_scan(BLOCK, TYPES3, self.req(projection=(1,)), cache=cache)
        entry = cache.lookup(("t", 0), 1)
        oracle = tokenize_oracle(BLOCK)
        assert entry is not None
        offs, valid = entry
        assert valid.all()
        assert offs.tolist() == [o[1][1] for o in oracle]

    @pytest.mark.parametrize("kernel", ["vector", "scalar"])
    def test_float_and_text_types(self, kernel):
        blk = b"1.5,a\n-2.25,b\n1e3,c\n"
        rows = full_scan(
            blk, ("float64", "text"),
            self.req(projection=(0, 1), predicate=(Comparison(0, ">", 0),)),
            kernel=kernel,
        )
        assert rows == [(1.5, "a"), (1000.0, "c")]

    @pytest.mark.parametrize("kernel", ["vector", "scalar"])
    def test_text_predicate(self, kernel):
        rows = full_scan(
            BLOCK, TYPES3,
            self.req(projection=(0,), predicate=(Comparison(2, "=", "zz"),)),
            kernel=kernel,
        )
        assert rows == [(777,)]


class TestKernelParity:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_rows_and_counters_match(self, seed):
        rng = np.random.default_rng(seed)
        arity = int(rng.integers(1, 10))
        nrows = int(rng.integers(0, 60))
        mixed_types = tuple(
            ("int64", "float64", "text")[int(rng.integers(0, 3))] for _ in range(arity)
        )
        lines = []
        for _ in range(nrows):
            fields = []
            for t in mixed_types:
                r = rng.integers(0, 6)
                if r == 0:
                    fields.append("")  # empty / junk for numerics
                elif t == "int64":
                    fields.append(str(rng.integers(-(10**9), 10**9)))
                elif t == "float64":
                    fields.append(f"{rng.integers(0, 10**6)}.{rng.integers(0, 100)}")
                else:
                    fields.append("v" + str(rng.integers(0, 100)))
            lines.append(",".join(fields) + "\n")
        blk = "".join(lines).encode()
        sampled_pool = [None, (), tuple(range(0, arity, 3))]
        pm_sampled = sampled_pool[int(rng.integers(0, 3))]
        pm = make_pm(blk, arity, pm_sampled) if pm_sampled is not None else None
        pred = ()
        if arity > 1 and rng.integers(0, 2):
            pa = int(rng.integers(0, arity))
            if mixed_types[pa] == "text":
                pred = (Comparison(pa, "!=", "v1"),)
            else:
                pred = (Comparison(pa, "<", 10**5),)
        proj = tuple(int(a) for a in rng.choice(arity, size=min(3, arity), replace=False))
        req = ScanRequest(
            table="t", ordinal=0, projection=proj, predicate=pred, access="full"
        )
        cv, cs = ScanCounters(), ScanCounters()
        rv = full_scan(blk, mixed_types, req, pm=pm, counters=cv, kernel="vector")
        rs = full_scan(blk, mixed_types, req, pm=pm, counters=cs, kernel="scalar")
        assert rv == rs
        assert cv == cs


class TestIndexScan:
    def req(self, **kw):
        base = dict(
            table="t", ordinal=0, projection=(2,),
            predicate=(Comparison(0, "<", 100),), access="index",
        )
        base.update(kw)
        return ScanRequest(**base)

    def test_matches_full_scan(self):
        vi = make_vi(BLOCK, 0)
        got = index_scan(BLOCK, TYPES3, self.req(), vi)
        exp = full_scan(BLOCK, TYPES3, self.req(access="full"))
        assert got == exp == [("xyz",), ("ab",)]

    def test_empty_match_reads_no_rows(self):
        vi = make_vi(BLOCK, 0)
        c = ScanCounters()
        rows = index_scan(
            BLOCK, TYPES3, self.req(predicate=(Comparison(0, "<", -1),)), vi, counters=c
        )
        assert rows == [] and c.rows_examined == 0 and c.conversions == 0

    def test_duplicate_keys_one_row_each_in_order(self):
        blk = b"7,a\n7,b\n3,c\n7,d\n"
        vi = make_vi(blk, 0)
        rows = index_scan(
            blk, ("int64", "text"),
            self.req(projection=(1,), predicate=(Comparison(0, "=", 7),)), vi,
        )
        assert rows == [("a",), ("b",), ("d",)]

    def test_count_mismatch_raises_inconsistency(self):
        vi = make_vi(BLOCK, 0)
        trimmed = VerticalIndex(0, "int64", vi.keys[:-1], vi.row_offsets[:-1])
        with pytest.raises(MetadataInconsistencyError):
            index_scan(BLOCK, TYPES3, self.req(), trimmed)

    def test_residual_predicate_applied(self):
        vi = make_vi(BLOCK, 0)
        rows = index_scan(
            BLOCK, TYPES3,
            self.req(
                projection=(2,),
                predicate=(Comparison(0, "<", 100), Comparison(1, ">", 500)),
            ),
            vi,
        )
        assert rows == [("xyz",), ("ab",)][1:] or rows == [("ab",)]

    def test_with_pm_anchors(self):
        vi = make_vi(BLOCK, 0)
        pm = make_pm(BLOCK, 3, (0, 2))
        c = ScanCounters()
        rows = index_scan(BLOCK, TYPES3, self.req(), vi, pm=pm, counters=c)
        assert rows == [("xyz",), ("ab",)]
        assert c.bytes_located == 0  # projection attr was sampled


class TestAccessPathEquivalence:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_index_equals_full_on_random_blocks(self, seed):
        rng = np.random.default_rng(seed)
        nrows = int(rng.integers(1, 80))
        arity = int(rng.integers(2, 8))
        m = rng.integers(0, 50, size=(nrows, arity))
        blk = b"".join(b",".join(str(v).encode() for v in r) + b"\n" for r in m)
        types = ("int64",) * arity
        vi = make_vi(blk, 0)
        op = ["<", "<=", ">", ">=", "=", "!="][int(rng.integers(0, 6))]
        lit = int(rng.integers(0, 50))
        proj = tuple(int(a) for a in rng.choice(arity, size=2, replace=False))
        pred = (Comparison(0, op, lit),)
        for sampled in (None, (), tuple(range(0, arity, 2))):
            pm = make_pm(blk, arity, sampled) if sampled is not None else None
            base = dict(table="t", ordinal=0, projection=proj, predicate=pred)
            r_full = full_scan(blk, types, ScanRequest(access="full", **base), pm=pm)
            r_idx = index_scan(blk, types, ScanRequest(access="index", **base), vi, pm=pm)
            assert r_full == r_idx


class TestMetadataCache:
    def test_decode_once(self):
        cache = MetadataCache()
        calls = []

        def loader():
            calls.append(1)
            return {"x": 1}, 8

        for _ in range(3):
            assert cache.get_or_load(("t", "pm", 0, 1), loader) == {"x": 1}
        assert len(calls) == 1 and cache.decode_count == 1

    def test_negative_result_cached(self):
        cache = MetadataCache()
        calls = []

        def loader():
            calls.append(1)
            return None, 8

        assert cache.get_or_load(("t", "pm", 0, 1), loader) is None
        assert cache.get_or_load(("t", "pm", 0, 1), loader) is None
        assert len(calls) == 1

    def test_concurrent_sessions_share_one_decode(self):
        import threading

        cache = MetadataCache()
        calls = []
        ev = threading.Event()

        def loader():
            calls.append(1)
            ev.wait(0.2)
            return {"pm": True}, 8

        results = []
        threads = [
            threading.Thread(
                target=lambda: results.append(cache.get_or_load(("t", "pm", 0, 9), loader))
            )
            for _ in range(4)
        ]
        for t in threads:
            t.start()
        ev.set()
        for t in threads:
            t.join()
        assert len(calls) == 1 and len(results) == 4
        assert all(r == {"pm": True} for r in results)


class TestMonotoneWork:
    def test_bytes_located_non_increasing_with_rate(self):
        rng = np.random.default_rng(99)
        arity = 40
        m = rng.integers(0, 10**9, size=(300, arity))
        blk = b"".join(b",".join(str(v).encode() for v in r) + b"\n" for r in m)
        types = ("int64",) * arity
        queries = [
            (int(rng.integers(0, arity)), int(rng.integers(0, arity))) for _ in range(20)
        ]
        totals = []
        for rate in (None, 0, 20, 10, 5, 1):
            sampled = None if rate is None else tuple(range(0, arity, rate)) if rate else ()
            pm = make_pm(blk, arity, sampled) if sampled is not None else None
            c = ScanCounters()
            for ax, ay in queries:
                full_scan(
                    blk, types,
                    ScanRequest(
                        table="t", ordinal=0, projection=(ax,),
                        predicate=(Comparison(ay, "<", 10**8),), access="full",
                    ),
                    pm=pm, counters=c,
                )
            totals.append(c.bytes_located)
        assert all(a >= b for a, b in zip(totals, totals[1:])), totals
        assert totals[-1] == 0  # every attribute sampled
