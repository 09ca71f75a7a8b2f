import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rawdb.blocks import BlockId, BlockMeta, Replica
from rawdb.catalog import Catalog, Schema, TableDescriptor
from rawdb.errors import PlanError
from rawdb.metadata import HllSketch, TableStatistics
from rawdb.sql.parser import parse
from rawdb.sql.planner import (
    PlanOptions,
    estimate_selectivity,
    explain_lines,
    plan,
)
from rawdb.scan import Comparison


def fake_desc(name, arity=10, blocks=3, rows_per_block=100, key_attrs=(),
              with_vi=False, stats=None):
    def meta(kind, i):
        return BlockMeta(
            BlockId(name, kind, i), 1000, rows_per_block, 0,
            (Replica("node0", "memory"),),
        )

    return TableDescriptor(
        name=name,
        schema=Schema.uniform(arity),
        data_blocks=[meta("data", i) for i in range(blocks)],
        vi_blocks=[meta("vi", i) for i in range(blocks)] if with_vi else [],
        key_attrs=tuple(key_attrs),
        stats=stats,
    )


@pytest.fixture
def cat(tmp_path):
    c = Catalog()
    c.register(fake_desc("t", key_attrs=(0,), with_vi=True))
    c.register(fake_desc("plain"))
    return c


def test_index_chosen_when_selectivity_clears_tau(cat):
    p = plan(parse("select a3 from t where a0 < 100000"), cat)
    assert p.probe.access.access == "index"
    assert p.probe.access.estimate == 0.001
    assert p.probe.access.estimate <= p.probe.access.tau


def test_full_without_vi(cat):
    p = plan(parse("select a3 from plain where a0 < 100000"), cat)
    assert p.probe.access.access == "full"
    assert "no vertical index" in p.probe.access.reason


def test_predicate_on_non_key_forces_full(cat):
    p = plan(parse("select a3 from t where a7 < 100000"), cat)
    assert p.probe.access.access == "full"


def test_use_index_off_forces_full(cat):
    p = plan(
        parse("select a3 from t where a0 < 100000"), cat, PlanOptions(use_index="off")
    )
    assert p.probe.access.access == "full"
    assert p.probe.access.reason == "use_index=off"


def test_use_index_on_forces_index(cat):
    p = plan(
        parse("select a3 from t where a0 < 100000"), cat,
        PlanOptions(use_index="on", tau=1e-9),
    )
    assert p.probe.access.access == "index"


def test_residual_split(cat):
    p = plan(parse("select a3 from t where a0 < 10 and a5 > 3"), cat)
    a = p.probe.access
    assert [c.attr for c in a.index_comps] == [0]
    assert [c.attr for c in a.residual_comps] == [5]


def test_fragments_cover_each_block_once(cat):
    p = plan(parse("select a3 from t where a0 < 10"), cat)
    reqs = p.scan_requests(p.probe)
    assert [r.ordinal for r in reqs] == [0, 1, 2]


def test_unknown_table_and_attr(cat):
    with pytest.raises(PlanError):
        plan(parse("select a0 from nosuch"), cat)
    with pytest.raises(PlanError):
        plan(parse("select a99 from t"), cat)


def test_mixing_agg_and_plain_requires_group(cat):
    with pytest.raises(PlanError):
        plan(parse("select a0, count(*) from t"), cat)
    p = plan(parse("select a0, count(*) from t group by a0"), cat)
    assert p.mode == "group"


def test_star_expands_to_schema(cat):
    p = plan(parse("select * from t"), cat)
    assert len(p.items) == 10
    assert p.columns == [f"a{i}" for i in range(10)]


def make_stats(arity, counts):
    sketches = {}
    for attr, distinct in counts.items():
        sk = HllSketch(12)
        for i in range(distinct):
            sk.insert(str(i).encode())
        sketches[attr] = sk
    return TableStatistics(sum(counts.values()), sketches)


def test_build_side_is_smaller_table():
    c = Catalog()
    c.register(fake_desc("big", blocks=10, rows_per_block=1000))
    c.register(fake_desc("small", blocks=1, rows_per_block=100))
    p = plan(parse("select count(*) from big join small on big.a0 = small.a1"), c)
    assert p.build.desc.name == "small"
    assert p.probe.desc.name == "big"


def test_build_side_tie_broken_by_distinct():
    c = Catalog()
    c.register(
        fake_desc("x", blocks=1, rows_per_block=100, stats=make_stats(10, {0: 90}))
    )
    c.register(
        fake_desc("y", blocks=1, rows_per_block=100, stats=make_stats(10, {1: 10}))
    )
    p = plan(parse("select count(*) from x join y on x.a0 = y.a1"), c)
    assert p.build.desc.name == "y"


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10**6), st.integers(1, 10**6), st.integers(1, 50))
def test_build_choice_invariant_under_scaling(rows_x, rows_y, factor):
    def mk(nx, ny):
        c = Catalog()
        c.register(fake_desc("x", blocks=1, rows_per_block=nx))
        c.register(fake_desc("y", blocks=1, rows_per_block=ny))
        return plan(parse("select count(*) from x join y on x.a0 = y.a1"), c).build.desc.name

    assert mk(rows_x, rows_y) == mk(rows_x * factor, rows_y * factor)


def test_join_key_must_be_numeric():
    c = Catalog()
    c.register(
        TableDescriptor(
            name="tx",
            schema=Schema.parse("k:text,v:int64"),
            data_blocks=[BlockMeta(BlockId("tx", "data", 0), 10, 1, 0,
                                   (Replica("node0", "memory"),))],
        )
    )
    c.register(fake_desc("ty"))
    with pytest.raises(PlanError, match="numeric"):
        plan(parse("select count(*) from tx join ty on tx.k = ty.a0"), c)


def test_equality_selectivity_uses_sketch():
    desc = fake_desc("z", stats=make_stats(10, {0: 1000}))
    est = estimate_selectivity([Comparison(0, "=", 5)], desc)
    assert 0.0008 < est < 0.0012


def test_range_selectivity_with_known_range():
    desc = fake_desc("z")
    est = estimate_selectivity(
        [Comparison(0, "<", 100000)], desc, ranges={0: (0.0, 1e9)}
    )
    assert est == pytest.approx(1e-4)


def test_explain_lines_have_tau_inputs(cat):
    p = plan(parse("select a3 from t where a0 < 100000"), cat)
    text = "\n".join(explain_lines(p))
    assert "access=index" in text and "tau" in text and "estimate" in text


def test_group_plain_column_must_be_grouped(cat):
    with pytest.raises(PlanError):
        plan(parse("select a1, count(*) from t group by a2"), cat)


def test_text_attr_numeric_literal_rejected():
    c = Catalog()
    c.register(
        TableDescriptor(
            name="tx",
            schema=Schema.parse("k:text,v:int64"),
            data_blocks=[BlockMeta(BlockId("tx", "data", 0), 10, 1, 0,
                                   (Replica("node0", "memory"),))],
        )
    )
    with pytest.raises(PlanError):
        plan(parse("select v from tx where k < 5"), c)
