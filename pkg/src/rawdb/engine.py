"""Single-process engine: ingest, plan, fan out fragments, merge.

This is the reference execution mode — the same planner, fragment payloads
and merge algebra the distributed coordinator uses, minus the network. Block
fragments run on a thread pool sized to cores minus one.
"""

from __future__ import annotations

import os
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import (
    DEFAULT_BLOCK_SIZE,
    NodeStore,
    ReplicationPolicy,
    StorageCluster,
)
from .catalog import Catalog, Schema, TableDescriptor
from .decorators import DecoratedWriter, DecoratorConfig, decorate_existing
from .errors import QueryError
from .node import NodeRuntime
from .scan import ScanCounters
from .sql import parser
from .sql.executor import Merger
from .sql.planner import PhysicalPlan, PlanOptions, SidePlan, explain_lines, plan as plan_query

DEFAULT_EXECUTORS = max(1, (os.cpu_count() or 2) - 1)


@dataclass
class FragmentReport:
    fragment_id: str
    table: str
    ordinal: int
    node: str
    latency_ms: float
    retries: int
    access: str
    counters: dict

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class QueryReport:
    fragments: list[FragmentReport] = field(default_factory=list)
    retries: int = 0
    counters: ScanCounters = field(default_factory=ScanCounters)
    elapsed_ms: float = 0.0
    approx: bool = False
    plan: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "fragments": [f.to_json() for f in self.fragments],
            "retries": self.retries,
            "counters": self.counters.to_json(),
            "elapsed_ms": self.elapsed_ms,
            "approx": self.approx,
            "plan": self.plan,
        }


@dataclass
class QueryResult:
    columns: list[str]
    rows: list[tuple]
    report: QueryReport

    def to_json(self) -> dict:
        return {
            "columns": self.columns,
            "rows": [list(r) for r in self.rows],
            "report": self.report.to_json(),
        }


def make_fragments(
    p: PhysicalPlan,
    side: SidePlan,
    query_id: str,
    partial_spec: dict,
    build_payload: dict | None = None,
    probe_key_col: int | None = None,
    kernel: str = "vector",
) -> list[dict]:
    """One fragment per data block of a side; together they cover the table
    exactly once."""
    desc = side.desc
    frags = []
    for req in p.scan_requests(side):
        i = req.ordinal
        frags.append(
            {
                "query_id": query_id,
                "fragment_id": f"{query_id}/{desc.name}/{i}",
                "table": desc.name,
                "ordinal": i,
                "block": desc.data_blocks[i].to_json(),
                "pm_block": desc.pm_blocks[i].to_json() if desc.pm_blocks else None,
                "vi_block": desc.vi_blocks[i].to_json() if desc.vi_blocks else None,
                "types": list(desc.schema.types()),
                "request": req.to_json(),
                "partial": partial_spec,
                "build": build_payload,
                "probe_key_col": probe_key_col,
                "kernel": kernel,
            }
        )
    return frags


def candidate_nodes(frag: dict, node_rank=None) -> list[str]:
    """Replica nodes in dispatch order: memory tier first, healthier first."""
    reps = frag["block"]["replicas"]
    nodes = [r["node"] for r in reps]
    if node_rank is None:
        return nodes
    return sorted(nodes, key=lambda n: (node_rank(n), nodes.index(n)))


ROWS_SPEC = {
    "mode": "rows", "items": [], "group_cols": [], "order_col": None,
    "order_desc": False, "limit": None, "exact_distinct": False, "distinct_precision": 12,
}


def run_plan(p: PhysicalPlan, dispatch, kernel: str = "vector") -> QueryResult:
    """Execute a plan through ``dispatch(fragments) -> iterable of
    (response, report)`` and merge the partials."""
    query_id = uuid.uuid4().hex[:12]
    report = QueryReport(plan=explain_lines(p))
    build_payload = None
    probe_key_col = None

    if p.build is not None:
        bfrags = make_fragments(p, p.build, query_id + "b", ROWS_SPEC, kernel=kernel)
        batches = []
        for resp, frep in dispatch(bfrags):
            report.fragments.append(frep)
            report.retries += frep.retries
            report.counters.add(ScanCounters.from_json(resp["counters"]))
            batches.append((resp["partial"]["ordinal"], resp["partial"]["rows"]))
        seen = {f.fragment_id for f in report.fragments}
        missing = {f["fragment_id"] for f in bfrags} - seen
        if missing:
            raise QueryError(f"incomplete build side: missing fragments {sorted(missing)[:4]}")
        batches.sort(key=lambda b: b[0])
        build_rows = [tuple(r) for _, rows in batches for r in rows]
        build_payload = {
            "rows": [list(r) for r in build_rows],
            "key_col": p.build.col_of(p.build.join_key_attr),
            "width": len(p.build.needed_attrs),
        }
        probe_key_col = p.probe.col_of(p.probe.join_key_attr)

    frags = make_fragments(
        p, p.probe, query_id, p.partial_spec(), build_payload, probe_key_col, kernel
    )
    merger = Merger(p)
    for resp, frep in dispatch(frags):
        report.fragments.append(frep)
        report.retries += frep.retries
        if merger.add(resp["fragment_id"], resp["partial"]):
            report.counters.add(ScanCounters.from_json(resp["counters"]))
    rows = merger.result({f["fragment_id"] for f in frags})
    approx = any(
        it.kind == "agg" and it.func == "count" and it.distinct for it in p.items
    ) and not p.options.exact_distinct
    report.approx = approx
    return QueryResult(columns=list(p.columns), rows=rows, report=report)


class LocalEngine:
    """Coordinator, workers and client folded into one process over one root.

    The layout under ``root`` is one directory per node (``node0`` ...)
    holding ``<table>/<kind>.<ordinal>.blk`` files, plus ``_catalog`` with a
    JSON manifest per table.
    """

    def __init__(
        self,
        root: Path | str,
        node_ids: tuple[str, ...] = ("node0",),
        replication: int = 1,
        block_size: int = DEFAULT_BLOCK_SIZE,
        kernel: str = "vector",
        executors: int | None = None,
        memory_cap: int = 4 << 30,
    ):
        self.root = Path(root)
        stores = [NodeStore(n, self.root / n, memory_cap=memory_cap) for n in node_ids]
        self.storage = StorageCluster(stores, ReplicationPolicy(replication, tuple(node_ids)))
        self.catalog = Catalog(self.root / "_catalog")
        self.runtimes = {n: NodeRuntime(self.storage.node(n), kernel) for n in node_ids}
        self.block_size = block_size
        self.kernel = kernel
        self.pool = ThreadPoolExecutor(max_workers=executors or DEFAULT_EXECUTORS)

    # ---- ingest ---------------------------------------------------------

    def ingest(
        self, csv_path: Path | str, table: str, schema: Schema, config: DecoratorConfig
    ) -> TableDescriptor:
        return decorate_existing(self.storage, self.catalog, csv_path, table, schema, config)

    def writer(self, table: str, schema: Schema, config: DecoratorConfig) -> DecoratedWriter:
        return DecoratedWriter(self.storage, self.catalog, table, schema, config)

    def drop(self, table: str) -> None:
        self.catalog.drop(table)
        self.storage.delete_table(table)
        for rt in self.runtimes.values():
            rt.drop_table(table)

    # ---- querying ---------------------------------------------------------

    def query(self, sql: str, options: dict | PlanOptions | None = None) -> QueryResult:
        stmt = parser.parse(sql)
        opts = (
            options
            if isinstance(options, PlanOptions)
            else PlanOptions.from_json(options)
        )
        if isinstance(stmt, parser.SetStatement):
            raise QueryError("SET only applies to an interactive session")
        if isinstance(stmt, parser.ExplainStatement):
            p = plan_query(stmt.query, self.catalog, opts)
            lines = explain_lines(p)
            return QueryResult(
                columns=["plan"], rows=[(l,) for l in lines], report=QueryReport(plan=lines)
            )
        p = plan_query(stmt, self.catalog, opts)
        kernel = opts.kernel or self.kernel
        return run_plan(p, self._dispatch, kernel)

    def _dispatch(self, frags: list[dict]):
        def run_one(frag):
            import time as _t

            node = candidate_nodes(frag)[0]
            t0 = _t.perf_counter()
            resp = self.runtimes[node].execute_fragment(frag)
            rep = FragmentReport(
                fragment_id=frag["fragment_id"],
                table=frag["table"],
                ordinal=frag["ordinal"],
                node=node,
                latency_ms=(_t.perf_counter() - t0) * 1000.0,
                retries=0,
                access=resp["access_used"],
                counters=resp["counters"],
            )
            return resp, rep

        if len(frags) == 1:
            yield run_one(frags[0])
            return
        yield from self.pool.map(run_one, frags)

    def close(self) -> None:
        self.pool.shutdown(wait=False)
