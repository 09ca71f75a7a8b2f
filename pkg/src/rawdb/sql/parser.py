"""Hand-written recursive-descent parser for the supported SQL subset.

Grammar (keywords case-insensitive)::

    statement  := EXPLAIN? query | SET ident = value
    query      := SELECT select_list FROM ident
                  [JOIN ident ON colref = colref]
                  [WHERE cmp (AND cmp)*]
                  [GROUP BY colref (, colref)*]
                  [ORDER BY colref (ASC|DESC)]
                  [LIMIT int]
    select_list := '*' | item (, item)*
    item       := colref | COUNT '(' '*' ')' | func '(' [DISTINCT] colref ')'
    cmp        := colref op literal        op in < <= > >= = != <>

Anything else recognizable (OR, subqueries, outer joins, HAVING, ...) raises
an explicit unsupported-construct error rather than a bare syntax error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import ParseError, UnsupportedSqlError

AGG_FUNCS = ("count", "sum", "avg", "min", "max")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>-?\d+\.\d*([eE][+-]?\d+)?|-?\.\d+([eE][+-]?\d+)?|-?\d+([eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>'(?:[^']|'')*')
  | (?P<op><=|>=|!=|<>|[<>=])
  | (?P<punct>[(),.*])
    """,
    re.VERBOSE,
)

_UNSUPPORTED_KEYWORDS = {
    "or": "OR",
    "not": "NOT",
    "having": "HAVING",
    "union": "UNION",
    "left": "outer joins",
    "right": "outer joins",
    "outer": "outer joins",
    "full": "outer joins",
    "cross": "CROSS JOIN",
    "in": "IN",
    "between": "BETWEEN",
    "like": "LIKE",
    "is": "IS",
    "case": "CASE",
    "exists": "subqueries",
    "with": "WITH",
    "insert": "INSERT",
    "update": "UPDATE",
    "delete": "DELETE",
    "create": "CREATE",
    "drop": "DROP",
}


@dataclass(frozen=True)
class Token:
    kind: str  # number | ident | string | op | punct | eof
    text: str
    line: int
    column: int


def _tokenize(sql: str) -> list[Token]:
    tokens = []
    line, col, pos = 1, 1, 0
    while pos < len(sql):
        m = _TOKEN_RE.match(sql, pos)
        if not m:
            raise ParseError(f"unexpected character {sql[pos]!r}", line, col)
        text = m.group(0)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, text, line, col))
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


@dataclass(frozen=True)
class ColumnRef:
    name: str
    table: str | None = None

    def __str__(self):
        return f"{self.table}.{self.name}" if self.table else self.name


@dataclass(frozen=True)
class Star:
    pass


@dataclass(frozen=True)
class Aggregate:
    func: str
    arg: ColumnRef | None  # None only for COUNT(*)
    distinct: bool = False

    def __str__(self):
        if self.arg is None:
            return "count(*)"
        inner = f"distinct {self.arg}" if self.distinct else str(self.arg)
        return f"{self.func}({inner})"


@dataclass(frozen=True)
class Condition:
    column: ColumnRef
    op: str
    value: int | float | str


@dataclass(frozen=True)
class JoinClause:
    table: str
    left: ColumnRef
    right: ColumnRef


@dataclass(frozen=True)
class OrderBy:
    column: ColumnRef
    desc: bool = False


@dataclass(frozen=True)
class Query:
    select: tuple
    table: str
    join: JoinClause | None = None
    where: tuple[Condition, ...] = ()
    group_by: tuple[ColumnRef, ...] = ()
    order_by: OrderBy | None = None
    limit: int | None = None


@dataclass(frozen=True)
class SetStatement:
    key: str
    value: str


@dataclass(frozen=True)
class ExplainStatement:
    query: Query


class _Parser:
    def __init__(self, sql: str):
        self.tokens = _tokenize(sql)
        self.i = 0

    # -- token helpers ------------------------------------------------------

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def at_keyword(self, *words: str) -> bool:
        t = self.peek()
        return t.kind == "ident" and t.text.lower() in words

    def expect_keyword(self, word: str) -> Token:
        t = self.next()
        if t.kind != "ident" or t.text.lower() != word:
            raise ParseError(f"expected {word.upper()}, found {t.text!r}", t.line, t.column)
        return t

    def expect(self, kind: str, text: str | None = None) -> Token:
        t = self.next()
        if t.kind != kind or (text is not None and t.text != text):
            what = text or kind
            raise ParseError(f"expected {what!r}, found {t.text!r}", t.line, t.column)
        return t

    def check_unsupported(self, t: Token) -> None:
        if t.kind == "ident":
            w = t.text.lower()
            if w in _UNSUPPORTED_KEYWORDS:
                raise UnsupportedSqlError(
                    f"{_UNSUPPORTED_KEYWORDS[w]} is not supported "
                    f"(line {t.line}, column {t.column})"
                )

    # -- grammar ------------------------------------------------------------

    def statement(self):
        t = self.peek()
        if self.at_keyword("explain"):
            self.next()
            return ExplainStatement(self.query())
        if self.at_keyword("set"):
            self.next()
            key = self.expect("ident").text.lower()
            self.expect("op", "=")
            v = self.next()
            if v.kind not in ("ident", "number", "string"):
                raise ParseError("expected a value", v.line, v.column)
            self._end()
            return SetStatement(key, v.text.strip("'"))
        self.check_unsupported(t)
        return self._finish_query()

    def _finish_query(self) -> Query:
        q = self.query()
        self._end()
        return q

    def _end(self) -> None:
        t = self.peek()
        if t.kind != "eof":
            self.check_unsupported(t)
            raise ParseError(f"unexpected trailing input {t.text!r}", t.line, t.column)

    def query(self) -> Query:
        self.expect_keyword("select")
        select = self.select_list()
        self.expect_keyword("from")
        table = self.table_name()
        join = None
        if self.at_keyword("inner", "join"):
            if self.at_keyword("inner"):
                self.next()
            self.expect_keyword("join")
            jt = self.table_name()
            self.expect_keyword("on")
            left = self.column_ref()
            self.expect("op", "=")
            right = self.column_ref()
            join = JoinClause(jt, left, right)
        where: tuple[Condition, ...] = ()
        if self.at_keyword("where"):
            self.next()
            where = self.conjunction()
        group: tuple[ColumnRef, ...] = ()
        if self.at_keyword("group"):
            self.next()
            self.expect_keyword("by")
            cols = [self.column_ref()]
            while self.peek().text == ",":
                self.next()
                cols.append(self.column_ref())
            group = tuple(cols)
        order = None
        if self.at_keyword("order"):
            self.next()
            self.expect_keyword("by")
            col = self.column_ref()
            desc = False
            if self.at_keyword("asc", "desc"):
                desc = self.next().text.lower() == "desc"
            order = OrderBy(col, desc)
        limit = None
        if self.at_keyword("limit"):
            self.next()
            t = self.expect("number")
            try:
                limit = int(t.text)
            except ValueError:
                raise ParseError("LIMIT must be an integer", t.line, t.column) from None
            if limit < 0:
                raise ParseError("LIMIT must be non-negative", t.line, t.column)
        return Query(
            select=select, table=table, join=join, where=where,
            group_by=group, order_by=order, limit=limit,
        )

    def select_list(self) -> tuple:
        if self.peek().text == "*":
            self.next()
            return (Star(),)
        items = [self.select_item()]
        while self.peek().text == ",":
            self.next()
            items.append(self.select_item())
        return tuple(items)

    def select_item(self):
        t = self.peek()
        self.check_unsupported(t)
        if t.kind == "ident" and t.text.lower() in AGG_FUNCS and self.tokens[self.i + 1].text == "(":
            func = self.next().text.lower()
            self.expect("punct", "(")
            if self.peek().text == "*":
                if func != "count":
                    raise ParseError(f"{func.upper()}(*) is not valid", t.line, t.column)
                self.next()
                self.expect("punct", ")")
                return Aggregate("count", None)
            distinct = False
            if self.at_keyword("distinct"):
                self.next()
                distinct = True
                if func != "count":
                    raise UnsupportedSqlError(f"DISTINCT inside {func.upper()} is not supported")
            arg = self.column_ref()
            self.expect("punct", ")")
            return Aggregate(func, arg, distinct)
        return self.column_ref()

    def table_name(self) -> str:
        t = self.next()
        if t.kind == "punct" and t.text == "(":
            raise UnsupportedSqlError(f"subqueries are not supported (line {t.line}, column {t.column})")
        if t.kind != "ident":
            raise ParseError(f"expected a table name, found {t.text!r}", t.line, t.column)
        self.check_unsupported(t)
        return t.text

    def column_ref(self) -> ColumnRef:
        t = self.next()
        if t.kind != "ident":
            raise ParseError(f"expected a column, found {t.text!r}", t.line, t.column)
        self.check_unsupported(t)
        if self.peek().text == ".":
            self.next()
            c = self.expect("ident")
            return ColumnRef(c.text, t.text)
        return ColumnRef(t.text)

    def conjunction(self) -> tuple[Condition, ...]:
        conds = [self.comparison()]
        while self.at_keyword("and"):
            self.next()
            conds.append(self.comparison())
        t = self.peek()
        self.check_unsupported(t)
        return tuple(conds)

    def comparison(self) -> Condition:
        col = self.column_ref()
        t = self.next()
        if t.kind != "op":
            self.check_unsupported(t)
            raise ParseError(f"expected a comparison operator, found {t.text!r}", t.line, t.column)
        op = "!=" if t.text == "<>" else t.text
        v = self.next()
        if v.kind == "number":
            value = float(v.text) if any(c in v.text for c in ".eE") else int(v.text)
        elif v.kind == "string":
            value = v.text[1:-1].replace("''", "'")
        elif v.kind == "ident":
            self.check_unsupported(v)
            raise UnsupportedSqlError(
                f"column-to-column comparisons are not supported (line {v.line}, column {v.column})"
            )
        else:
            raise ParseError(f"expected a literal, found {v.text!r}", v.line, v.column)
        return Condition(col, op, value)


def parse(sql: str):
    """Parse one statement; returns Query, ExplainStatement or SetStatement."""
    return _Parser(sql).statement()
