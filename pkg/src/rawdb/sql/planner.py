"""Query planning: name resolution, access-path choice, fragment layout.

Access path: a table is scanned through its vertical index only when the
index exists on a WHERE attribute and the estimated selectivity clears the
threshold (or the session forces it on). Join build side is the smaller
estimated cardinality — record count, tie-broken by the join key's
distinct-count estimate — and is broadcast to every probe fragment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..catalog import Catalog, TableDescriptor, TYPE_FLOAT64, TYPE_INT64, TYPE_TEXT
from ..errors import CatalogError, PlanError
from ..scan import ACCESS_FULL, ACCESS_INDEX, Comparison, ScanRequest
from .parser import Aggregate, ColumnRef, JoinClause, OrderBy, Query, Star

DEFAULT_TAU = 0.01
DEFAULT_SELECTIVITY = 0.001


@dataclass(frozen=True)
class PlanOptions:
    use_index: str = "auto"  # auto | on | off
    exact_distinct: bool = False
    tau: float = DEFAULT_TAU
    kernel: str = "vector"

    @classmethod
    def from_json(cls, d: dict | None) -> "PlanOptions":
        d = d or {}
        opts = cls(
            use_index=d.get("use_index", "auto"),
            exact_distinct=bool(d.get("exact_distinct", False)),
            tau=float(d.get("tau", DEFAULT_TAU)),
            kernel=d.get("kernel", "vector"),
        )
        if opts.use_index not in ("auto", "on", "off"):
            raise PlanError(f"use_index must be auto, on or off, not {opts.use_index!r}")
        return opts


@dataclass
class TableAccess:
    table: str
    access: str
    key_attr: int | None
    index_comps: list[Comparison]
    residual_comps: list[Comparison]
    estimate: float | None
    tau: float
    reason: str


@dataclass
class Item:
    """One resolved select item (plain column or aggregate)."""

    kind: str  # column | agg
    name: str
    type: str
    func: str | None = None
    distinct: bool = False
    col: int | None = None  # index into the combined scan row


@dataclass
class SidePlan:
    desc: TableDescriptor
    needed_attrs: tuple[int, ...]  # scan projection, ascending
    access: TableAccess
    join_key_attr: int | None = None

    def col_of(self, attr: int) -> int:
        return self.needed_attrs.index(attr)


@dataclass
class PhysicalPlan:
    query: Query
    probe: SidePlan
    build: SidePlan | None
    items: list[Item]
    group_cols: list[int]
    order_col: int | None
    order_desc: bool
    limit: int | None
    mode: str  # rows | agg | group | topk
    options: PlanOptions
    distinct_precision: int = 12
    columns: list[str] = field(default_factory=list)

    def partial_spec(self) -> dict:
        return {
            "mode": self.mode,
            "items": [
                {
                    "kind": it.kind,
                    "func": it.func,
                    "col": it.col,
                    "distinct": it.distinct,
                    "type": it.type,
                }
                for it in self.items
            ],
            "group_cols": self.group_cols,
            "order_col": self.order_col,
            "order_desc": self.order_desc,
            "limit": self.limit,
            "exact_distinct": self.options.exact_distinct,
            "distinct_precision": self.distinct_precision,
        }

    def scan_requests(self, side: SidePlan) -> list[ScanRequest]:
        comps = side.access.index_comps + side.access.residual_comps
        # a fragment-level limit is only safe with no ordering, grouping or join
        limit = None
        if (
            self.mode == "rows"
            and self.order_col is None
            and self.build is None
            and side is self.probe
        ):
            limit = self.limit
        return [
            ScanRequest(
                table=side.desc.name,
                ordinal=i,
                projection=side.needed_attrs,
                predicate=tuple(sorted(comps, key=lambda c: c.attr)),
                access=side.access.access,
                limit=limit,
            )
            for i in range(len(side.desc.data_blocks))
        ]


def estimate_selectivity(
    comps: list[Comparison],
    desc: TableDescriptor,
    ranges: dict[int, tuple[float, float]] | None = None,
) -> float:
    """Combined selectivity estimate for a conjunction on one table.

    Equality uses the distinct-count sketch when the attribute is tracked;
    range comparisons use the value range when one is known. Everything else
    falls back to the default.
    """
    est = 1.0
    for c in comps:
        if c.op == "=" and desc.stats is not None and c.attr in desc.stats.sketches:
            d = max(desc.stats.distinct(c.attr), 1.0)
            est = min(est, 1.0 / d)
        elif c.op in ("<", "<=", ">", ">=") and ranges and c.attr in ranges:
            lo, hi = ranges[c.attr]
            if hi > lo:
                frac = (float(c.value) - lo) / (hi - lo)
                if c.op in (">", ">="):
                    frac = 1.0 - frac
                est = min(est, min(max(frac, 0.0), 1.0))
        else:
            est = min(est, DEFAULT_SELECTIVITY)
    return est


def _plan_access(
    desc: TableDescriptor, comps: list[Comparison], options: PlanOptions
) -> TableAccess:
    key_attr = desc.key_attrs[0] if desc.key_attrs and desc.vi_blocks else None
    eligible = [c for c in comps if c.attr == key_attr] if key_attr is not None else []
    residual = [c for c in comps if not any(c is e for e in eligible)]
    if key_attr is None or not eligible:
        reason = "no vertical index on a WHERE attribute"
        return TableAccess(desc.name, ACCESS_FULL, key_attr, [], comps, None, options.tau, reason)
    if options.use_index == "off":
        return TableAccess(
            desc.name, ACCESS_FULL, key_attr, [], comps, None, options.tau, "use_index=off"
        )
    est = estimate_selectivity(eligible, desc)
    if options.use_index == "on":
        return TableAccess(
            desc.name, ACCESS_INDEX, key_attr, eligible, residual, est, options.tau,
            "use_index=on",
        )
    if est <= options.tau:
        reason = f"estimated selectivity {est:.6g} <= tau {options.tau:g}"
        return TableAccess(desc.name, ACCESS_INDEX, key_attr, eligible, residual, est,
                           options.tau, reason)
    reason = f"estimated selectivity {est:.6g} > tau {options.tau:g}"
    return TableAccess(desc.name, ACCESS_FULL, key_attr, [], comps, est, options.tau, reason)


def plan(query: Query, catalog: Catalog, options: PlanOptions | None = None) -> PhysicalPlan:
    options = options or PlanOptions()
    try:
        left = catalog.get(query.table)
        right = catalog.get(query.join.table) if query.join else None
    except CatalogError as e:
        raise PlanError(str(e)) from None
    if right is not None and right.name == left.name:
        raise PlanError("self-joins are not supported")

    def resolve(col: ColumnRef) -> tuple[TableDescriptor, int]:
        if col.table is not None:
            for d in (left, right):
                if d is not None and d.name == col.table:
                    try:
                        return d, d.schema.index(col.name)
                    except CatalogError as e:
                        raise PlanError(str(e)) from None
            raise PlanError(f"unknown table {col.table!r} in {col}")
        hits = []
        for d in (left, right):
            if d is not None and col.name in d.schema.names():
                hits.append((d, d.schema.index(col.name)))
        if not hits:
            raise PlanError(f"unknown attribute {col.name!r}")
        if len(hits) > 1:
            raise PlanError(f"ambiguous attribute {col.name!r}; qualify it with a table name")
        return hits[0]

    # ---- join sides and build choice ---------------------------------------
    join_attr: dict[str, int] = {}
    if query.join is not None:
        ld, li = resolve(query.join.left)
        rd, ri = resolve(query.join.right)
        if {ld.name, rd.name} != {left.name, right.name}:
            raise PlanError("join condition must reference both tables")
        for d, i in ((ld, li), (rd, ri)):
            if d.schema.attrs[i].type == TYPE_TEXT:
                raise PlanError("join keys must be numeric")
            join_attr[d.name] = i
        build_desc = _choose_build_side(left, right, join_attr)
        probe_desc = right if build_desc is left else left
    else:
        probe_desc, build_desc = left, None

    # ---- select items -------------------------------------------------------
    select = query.select
    if any(isinstance(s, Star) for s in select):
        if len(select) != 1:
            raise PlanError("* cannot be combined with other select items")
        cols = [ColumnRef(n, left.name) for n in left.schema.names()]
        if right is not None:
            cols += [ColumnRef(n, right.name) for n in right.schema.names()]
        select = tuple(cols)

    has_agg = any(isinstance(s, Aggregate) for s in select)
    has_plain = any(isinstance(s, ColumnRef) for s in select)
    if has_agg and has_plain and not query.group_by:
        raise PlanError("aggregates and plain attributes mix only under GROUP BY")
    if query.group_by and not has_agg:
        raise PlanError("GROUP BY requires at least one aggregate")

    group_refs = [resolve(c) for c in query.group_by]
    if query.group_by:
        for s in select:
            if isinstance(s, ColumnRef) and resolve(s) not in group_refs:
                raise PlanError(f"{s} must appear in GROUP BY")

    # ---- needed attributes per side -----------------------------------------
    needed: dict[str, set[int]] = {probe_desc.name: set()}
    if build_desc is not None:
        needed[build_desc.name] = set()

    def need(col: ColumnRef) -> tuple[TableDescriptor, int]:
        d, i = resolve(col)
        needed[d.name].add(i)
        return d, i

    item_refs: list[tuple] = []
    for s in select:
        if isinstance(s, Aggregate):
            if s.arg is None:
                item_refs.append(("agg", s, None, None))
            else:
                d, i = need(s.arg)
                t = d.schema.attrs[i].type
                if s.func in ("sum", "avg") and t == TYPE_TEXT:
                    raise PlanError(f"{s.func.upper()} needs a numeric attribute")
                item_refs.append(("agg", s, d, i))
        else:
            d, i = need(s)
            item_refs.append(("col", s, d, i))
    for d, i in group_refs:
        needed[d.name].add(i)
    order_ref = None
    if query.order_by is not None:
        order_ref = need(query.order_by.column)
        if query.group_by and order_ref not in group_refs:
            raise PlanError("ORDER BY must name a grouped attribute when grouping")
    if query.join is not None:
        needed[probe_desc.name].add(join_attr[probe_desc.name])
        needed[build_desc.name].add(join_attr[build_desc.name])

    # ---- predicates ----------------------------------------------------------
    comps: dict[str, list[Comparison]] = {probe_desc.name: []}
    if build_desc is not None:
        comps[build_desc.name] = []
    for cond in query.where:
        d, i = resolve(cond.column)
        t = d.schema.attrs[i].type
        v = cond.value
        if t == TYPE_TEXT and not isinstance(v, str):
            raise PlanError(f"attribute {cond.column} is text; compare it to a string")
        if t in (TYPE_INT64, TYPE_FLOAT64) and isinstance(v, str):
            raise PlanError(f"attribute {cond.column} is numeric; compare it to a number")
        if t == TYPE_FLOAT64:
            v = float(v)
        comps[d.name].append(Comparison(i, cond.op, v))

    # ---- combined row layout -------------------------------------------------
    probe_attrs = tuple(sorted(needed[probe_desc.name]))
    build_attrs = tuple(sorted(needed[build_desc.name])) if build_desc is not None else ()

    def col_of(d: TableDescriptor, attr: int) -> int:
        if d is probe_desc:
            return probe_attrs.index(attr)
        return len(probe_attrs) + build_attrs.index(attr)

    items: list[Item] = []
    columns: list[str] = []
    names_seen = [s for s in select]
    for kind, s, d, i in item_refs:
        if kind == "agg":
            if s.arg is None:
                items.append(Item("agg", "count(*)", TYPE_INT64, func="count"))
            else:
                t = d.schema.attrs[i].type
                out_t = TYPE_FLOAT64 if s.func == "avg" else t
                if s.func == "count":
                    out_t = TYPE_INT64
                items.append(
                    Item("agg", str(s), out_t, func=s.func, distinct=s.distinct,
                         col=col_of(d, i))
                )
            columns.append(str(s))
        else:
            items.append(Item("column", str(s), d.schema.attrs[i].type, col=col_of(d, i)))
            dup = sum(
                1 for k2, s2, d2, i2 in item_refs
                if k2 == "col" and s2.name == s.name and d2 is not d
            )
            columns.append(f"{d.name}.{s.name}" if dup else s.name)

    group_cols = [col_of(d, i) for d, i in group_refs]
    order_col = col_of(*order_ref) if order_ref else None

    if has_agg and query.group_by:
        mode = "group"
    elif has_agg:
        mode = "agg"
    elif query.order_by is not None and query.limit is not None:
        mode = "topk"
    else:
        mode = "rows"

    probe_access = _plan_access(probe_desc, comps[probe_desc.name], options)
    probe = SidePlan(
        probe_desc, probe_attrs, probe_access,
        join_attr.get(probe_desc.name),
    )
    build = None
    if build_desc is not None:
        build = SidePlan(
            build_desc, build_attrs, _plan_access(build_desc, comps[build_desc.name], options),
            join_attr.get(build_desc.name),
        )

    return PhysicalPlan(
        query=query,
        probe=probe,
        build=build,
        items=items,
        group_cols=group_cols,
        order_col=order_col,
        order_desc=query.order_by.desc if query.order_by else False,
        limit=query.limit,
        mode=mode,
        options=options,
        columns=columns,
    )


def _choose_build_side(
    left: TableDescriptor, right: TableDescriptor, join_attr: dict[str, int]
) -> TableDescriptor:
    lc, rc = left.record_count, right.record_count
    if lc != rc:
        return left if lc < rc else right
    # tie: prefer the side with fewer distinct join-key values
    ld = rd = None
    if left.stats is not None and join_attr[left.name] in left.stats.sketches:
        ld = left.stats.distinct(join_attr[left.name])
    if right.stats is not None and join_attr[right.name] in right.stats.sketches:
        rd = right.stats.distinct(join_attr[right.name])
    if ld is not None and rd is not None and ld != rd:
        return left if ld < rd else right
    return left


def explain_lines(p: PhysicalPlan) -> list[str]:
    """Human-readable plan summary for EXPLAIN."""
    out = [f"mode: {p.mode}"]
    sides = [("probe", p.probe)] + ([("build", p.build)] if p.build else [])
    for role, side in sides:
        a = side.access
        out.append(
            f"{role} {side.desc.name}: access={a.access} "
            f"fragments={len(side.desc.data_blocks)}"
        )
        est = "n/a" if a.estimate is None else f"{a.estimate:.6g}"
        out.append(f"  index: key_attr={a.key_attr} estimate={est} tau={a.tau:g} ({a.reason})")
        if a.index_comps:
            out.append(
                "  index predicate: "
                + " and ".join(f"a{c.attr} {c.op} {c.value}" for c in a.index_comps)
            )
        if a.residual_comps:
            out.append(
                "  residual predicate: "
                + " and ".join(f"a{c.attr} {c.op} {c.value}" for c in a.residual_comps)
            )
    if p.build is not None:
        out.append(f"build side: {p.build.desc.name} (broadcast)")
    if p.order_col is not None:
        out.append(f"order: col {p.order_col} {'desc' if p.order_desc else 'asc'} limit {p.limit}")
    elif p.limit is not None:
        out.append(f"limit: {p.limit}")
    return out
