import pytest

from rawdb.errors import ParseError, UnsupportedSqlError
from rawdb.sql.parser import (
    Aggregate,
    ColumnRef,
    Condition,
    ExplainStatement,
    OrderBy,
    Query,
    SetStatement,
    Star,
    parse,
)


def test_select_project_template():
    q = parse("select a3 from t where a7 < 100000")
    assert q == Query(
        select=(ColumnRef("a3"),),
        table="t",
        where=(Condition(ColumnRef("a7"), "<", 100000),),
    )


def test_topk_template():
    q = parse("select docid, p_topic_4 from t order by p_topic_4 desc limit 10")
    assert q.select == (ColumnRef("docid"), ColumnRef("p_topic_4"))
    assert q.order_by == OrderBy(ColumnRef("p_topic_4"), desc=True)
    assert q.limit == 10


def test_star_projection():
    q = parse("select * from t where a0 < 100000")
    assert q.select == (Star(),)


def test_aggregates():
    q = parse("select count(*), count(distinct a1), sum(a2), avg(a3), min(a4), max(a5) from t")
    assert q.select[0] == Aggregate("count", None)
    assert q.select[1] == Aggregate("count", ColumnRef("a1"), distinct=True)
    assert q.select[2] == Aggregate("sum", ColumnRef("a2"))


def test_group_by_and_order():
    q = parse("select a1, count(*) from t group by a1 order by a1 asc limit 3")
    assert q.group_by == (ColumnRef("a1"),)
    assert q.order_by == OrderBy(ColumnRef("a1"), desc=False)
    assert q.limit == 3


def test_join():
    q = parse("select count(*) from big join small on big.a1 = small.a0 where small.a2 < 7")
    assert q.join.table == "small"
    assert q.join.left == ColumnRef("a1", "big")
    assert q.join.right == ColumnRef("a0", "small")
    assert q.where == (Condition(ColumnRef("a2", "small"), "<", 7),)


def test_inner_join_keyword():
    q = parse("select a0 from t1 inner join t2 on t1.a0 = t2.a0")
    assert q.join is not None


def test_conjunction_and_ops():
    q = parse("select a0 from t where a1 >= 5 and a2 != 3 and a3 <> 4 and a4 = 'x'")
    assert [c.op for c in q.where] == [">=", "!=", "!=", "="]
    assert q.where[3].value == "x"


def test_float_and_negative_literals():
    q = parse("select a0 from t where a1 < -5 and a2 < 1.5e3")
    assert q.where[0].value == -5
    assert q.where[1].value == 1500.0


def test_explain_and_set():
    e = parse("explain select a0 from t")
    assert isinstance(e, ExplainStatement)
    s = parse("set use_index = off")
    assert s == SetStatement("use_index", "off")


def test_syntax_error_has_position():
    with pytest.raises(ParseError) as err:
        parse("select a0 frm t")
    assert err.value.line == 1 and err.value.column > 1


def test_unexpected_character_position():
    with pytest.raises(ParseError) as err:
        parse("select a0 from t where a1 < ;")
    assert err.value.column == 29


@pytest.mark.parametrize(
    "sql,construct",
    [
        ("select a0 from t where a1 < 5 or a2 < 3", "OR"),
        ("select a0 from (select a1 from t)", "subqueries"),
        ("select a0 from t left join u on t.a = u.b", "outer joins"),
        ("select a0 from t where a1 in (1,2)", "IN"),
        ("select a0 from t group by a0 having count(*) > 1", "HAVING"),
        ("select a0 from t where not a1 < 5", "NOT"),
        ("select a0 from t where a1 between 1 and 2", "BETWEEN"),
        ("insert into t values (1)", "INSERT"),
    ],
)
def test_unsupported_constructs_named(sql, construct):
    with pytest.raises(UnsupportedSqlError, match=construct):
        parse(sql)


def test_trailing_garbage_rejected():
    with pytest.raises(ParseError):
        parse("select a0 from t limit 5 extra")


def test_strings_with_escaped_quote():
    q = parse("select a0 from t where a1 = 'it''s'")
    assert q.where[0].value == "it's"


def test_count_star_only_for_count():
    with pytest.raises(ParseError):
        parse("select sum(*) from t")
