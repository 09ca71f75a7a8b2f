"""Coordinator role: catalog, node registry, query fan-out and merge.

The client path lives inside the coordinator: a query is parsed and planned
here, one fragment per data block is pushed to the first replica holding the
block (memory tier first, healthier nodes first), partials are merged exactly
once per fragment, and slow fragments are hedged to the next replica after a
timeout of twice the rolling median fragment latency (floored). The original
attempt is never cancelled; the first completed answer wins.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from pathlib import Path

import requests

from ..catalog import Catalog, TableDescriptor, lookup_locations
from ..engine import FragmentReport, QueryReport, QueryResult, run_plan
from ..errors import CatalogError, ParseError, PlanError, QueryError, SqlError, UnsupportedSqlError
from ..sql import parser
from ..sql.planner import PlanOptions, explain_lines, plan as plan_query
from .http import JsonHttpServer, StaticDir

log = logging.getLogger(__name__)

STATE_LIVE = "live"
STATE_SUSPECT = "suspect"
STATE_DEAD = "dead"
_STATE_RANK = {STATE_LIVE: 0, STATE_SUSPECT: 1, STATE_DEAD: 2}


class NodeEntry:
    def __init__(self, node_id: str, address: str):
        self.node_id = node_id
        self.address = address
        self.last_heartbeat = time.time()
        self.registered_at = time.time()
        self.fragments_dispatched = 0

    def state(self, heartbeat_s: float, now: float | None = None) -> str:
        gap = (now or time.time()) - self.last_heartbeat
        if gap <= heartbeat_s:
            return STATE_LIVE
        if gap <= 3 * heartbeat_s:
            return STATE_SUSPECT
        return STATE_DEAD

    def to_json(self, heartbeat_s: float) -> dict:
        return {
            "node_id": self.node_id,
            "address": self.address,
            "state": self.state(heartbeat_s),
            "last_heartbeat_ms": int(self.last_heartbeat * 1000),
            "fragments_dispatched": self.fragments_dispatched,
        }


class Coordinator:
    def __init__(
        self,
        root: Path | str,
        host: str = "127.0.0.1",
        port: int = 0,
        heartbeat_s: float = 1.0,
        hedge_floor_ms: float = 250.0,
        default_timeout_ms: float = 30_000.0,
        fault_injection: bool = False,
        console_dir: Path | str | None = None,
        kernel: str = "vector",
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.catalog = Catalog(self.root)
        self.heartbeat_s = heartbeat_s
        self.hedge_floor_ms = hedge_floor_ms
        self.default_timeout_ms = default_timeout_ms
        self.fault_injection = fault_injection
        self.console_dir = Path(console_dir) if console_dir else None
        self.kernel = kernel
        self.nodes: dict[str, NodeEntry] = {}
        self._nodes_lock = threading.Lock()
        self._latencies: deque[float] = deque(maxlen=101)
        self._pool = ThreadPoolExecutor(max_workers=64, thread_name_prefix="dispatch")
        self.server = JsonHttpServer(
            [
                ("POST", r"/v1/query", self._h_query),
                ("GET", r"/v1/tables", self._h_tables),
                ("GET", r"/v1/tables/([^/]+)", self._h_table),
                ("POST", r"/v1/tables", self._h_register_table),
                ("GET", r"/v1/nodes", self._h_nodes),
                ("POST", r"/v1/nodes/([^/]+)/kill", self._h_kill_node),
                ("POST", r"/v1/register", self._h_register),
                ("POST", r"/v1/heartbeat", self._h_heartbeat),
                ("GET", r"/v1/health", self._h_health),
                ("GET", r"/console(?:/(.*))?", self._h_console),
            ],
            host=host,
            port=port,
            name="coordinator",
        )
        self.url = self.server.url

    # ---- lifecycle -----------------------------------------------------------

    def start(self) -> "Coordinator":
        self.server.start()
        return self

    def stop(self) -> None:
        self.server.stop()
        self._pool.shutdown(wait=False)

    # ---- node registry ---------------------------------------------------------

    def register_worker(self, node_id: str, address: str) -> dict:
        with self._nodes_lock:
            entry = self.nodes.get(node_id)
            if entry is None or entry.address != address:
                entry = NodeEntry(node_id, address)
                self.nodes[node_id] = entry
            entry.last_heartbeat = time.time()
        return {
            "status": "ok",
            "node_id": node_id,
            "revalidated": self._revalidate(node_id, address),
        }

    def _revalidate(self, node_id: str, address: str) -> int:
        """Spot-check a few of the node's blocks by checksum after a restart."""
        owned = []
        for t in self.catalog.tables():
            desc = self.catalog.get(t)
            for meta in desc.data_blocks:
                if node_id in meta.replica_nodes():
                    owned.append(meta)
        checked = 0
        for meta in random.Random(0).sample(owned, min(3, len(owned))):
            try:
                r = requests.post(
                    f"{address}/v1/read_block",
                    json={"block": meta.to_json(), "checksum_only": True},
                    timeout=10,
                )
                r.raise_for_status()
                if int(r.json()["checksum"], 16) != meta.checksum:
                    log.warning("%s returned a bad checksum for %s", node_id, meta.id)
                else:
                    checked += 1
            except requests.RequestException as e:
                log.warning("revalidation of %s failed: %s", node_id, e)
        return checked

    def node_state(self, node_id: str) -> str:
        with self._nodes_lock:
            entry = self.nodes.get(node_id)
        return entry.state(self.heartbeat_s) if entry else STATE_DEAD

    # ---- query execution ---------------------------------------------------------

    def run_query(self, sql: str, options: dict | None = None) -> QueryResult:
        opts = PlanOptions.from_json(options)
        timeout_ms = float((options or {}).get("timeout_ms", self.default_timeout_ms))
        stmt = parser.parse(sql)
        if isinstance(stmt, parser.SetStatement):
            raise QueryError("SET only applies to an interactive session")
        if isinstance(stmt, parser.ExplainStatement):
            p = plan_query(stmt.query, self.catalog, opts)
            lines = explain_lines(p)
            return QueryResult(["plan"], [(l,) for l in lines], QueryReport(plan=lines))
        p = plan_query(stmt, self.catalog, opts)

        def dispatch(frags):
            from concurrent.futures import as_completed

            futures = [self._pool.submit(self._run_fragment, f, timeout_ms) for f in frags]
            for fut in as_completed(futures):
                yield fut.result()

        t0 = time.perf_counter()
        result = run_plan(p, dispatch, kernel=self.kernel)
        result.report.elapsed_ms = (time.perf_counter() - t0) * 1000.0
        return result

    def _candidates(self, frag: dict) -> list[tuple[str, str]]:
        """(node_id, address) in dispatch order: tier order, then health."""
        reps = frag["block"]["replicas"]
        now = time.time()
        with self._nodes_lock:
            entries = dict(self.nodes)
        ranked = []
        for i, r in enumerate(reps):
            entry = entries.get(r["node"])
            state = entry.state(self.heartbeat_s, now) if entry else STATE_DEAD
            if entry is not None:
                ranked.append((_STATE_RANK[state], i, r["node"], entry.address))
        ranked.sort(key=lambda t: (t[0], t[1]))
        return [(n, a) for _, _, n, a in ranked]

    def _hedge_timeout_s(self) -> float:
        with self._nodes_lock:
            lat = sorted(self._latencies)
        med = lat[len(lat) // 2] if lat else 0.0
        return max(self.hedge_floor_ms / 1000.0, 2 * med)

    def _run_fragment(self, frag: dict, timeout_ms: float):
        """Dispatch one fragment with failover and hedging.

        The first candidate is tried immediately; on failure, or after the
        hedge timeout with no answer, the next replica is tried while earlier
        attempts stay in flight. The first successful answer wins.
        """
        candidates = self._candidates(frag)
        if not candidates:
            raise QueryError(f"no known replica holder for block {frag['table']}/{frag['ordinal']}")
        deadline = time.monotonic() + timeout_ms / 1000.0
        pending: dict = {}
        launched = 0
        errors: list[str] = []
        t0 = time.monotonic()
        launch_next = True
        while True:
            now = time.monotonic()
            if now >= deadline:
                raise QueryError(
                    f"fragment {frag['fragment_id']} timed out on all attempts: {errors}"
                )
            if launch_next and launched < len(candidates):
                node, addr = candidates[launched]
                fut = self._pool.submit(self._post_fragment, addr, frag, deadline)
                pending[fut] = node
                launched += 1
                with self._nodes_lock:
                    if node in self.nodes:
                        self.nodes[node].fragments_dispatched += 1
            launch_next = False
            if not pending:
                raise QueryError(
                    f"fragment {frag['fragment_id']} failed on all replicas: {errors}"
                )
            remaining = deadline - time.monotonic()
            wait_s = (
                min(remaining, self._hedge_timeout_s())
                if launched < len(candidates)
                else remaining
            )
            done, _ = wait(list(pending), timeout=max(wait_s, 0.0), return_when=FIRST_COMPLETED)
            if not done:
                launch_next = True  # hedge: redirect without cancelling
                continue
            for fut in done:
                node = pending.pop(fut)
                err = fut.exception()
                if err is not None:
                    errors.append(f"{node}: {err}")
                    launch_next = True
                    continue
                resp = fut.result()
                latency = (time.monotonic() - t0) * 1000.0
                with self._nodes_lock:
                    self._latencies.append(latency / 1000.0)
                report = FragmentReport(
                    fragment_id=frag["fragment_id"],
                    table=frag["table"],
                    ordinal=frag["ordinal"],
                    node=node,
                    latency_ms=latency,
                    retries=launched - 1,
                    access=resp.get("access_used", ""),
                    counters=resp.get("counters", {}),
                )
                return resp, report

    def _post_fragment(self, address: str, frag: dict, deadline: float) -> dict:
        timeout = max(0.05, deadline - time.monotonic())
        r = requests.post(f"{address}/v1/fragment", json=frag, timeout=timeout)
        r.raise_for_status()
        return r.json()

    # ---- handlers -----------------------------------------------------------------

    def _h_query(self, match, body):
        sql = (body or {}).get("sql", "")
        options = (body or {}).get("options") or {}
        try:
            result = self.run_query(sql, options)
            return 200, result.to_json()
        except (ParseError, UnsupportedSqlError, PlanError) as e:
            payload = {"error": str(e), "kind": type(e).__name__}
            if isinstance(e, ParseError):
                payload["line"] = e.line
                payload["column"] = e.column
            return 400, payload
        except (QueryError, CatalogError) as e:
            return 500, {"error": str(e), "kind": type(e).__name__}

    def _h_tables(self, match, body):
        return 200, {"tables": self.catalog.tables()}

    def _h_table(self, match, body):
        try:
            desc = self.catalog.get(match.group(1))
        except CatalogError as e:
            return 404, {"error": str(e)}
        dead = {n for n in self.nodes if self.node_state(n) == STATE_DEAD}
        payload = desc.to_json()
        payload["locations"] = [
            {**loc, "pm": loc["pm"].filename if loc["pm"] else None,
             "vi": loc["vi"].filename if loc["vi"] else None,
             "stats": loc["stats"].filename if loc["stats"] else None}
            for loc in lookup_locations(desc, dead)
        ]
        return 200, payload

    def _h_register_table(self, match, body):
        try:
            self.catalog.register(TableDescriptor.from_json(body))
        except CatalogError as e:
            return 409, {"error": str(e)}
        return 200, {"status": "ok"}

    def _h_nodes(self, match, body):
        with self._nodes_lock:
            nodes = [e.to_json(self.heartbeat_s) for e in self.nodes.values()]
        return 200, {"nodes": sorted(nodes, key=lambda n: n["node_id"])}

    def _h_kill_node(self, match, body):
        if not self.fault_injection:
            return 403, {"error": "fault injection is disabled"}
        node_id = match.group(1)
        with self._nodes_lock:
            entry = self.nodes.get(node_id)
        if entry is None:
            return 404, {"error": f"unknown node {node_id!r}"}
        try:
            r = requests.post(f"{entry.address}/v1/kill", timeout=5)
            return r.status_code, r.json()
        except requests.RequestException as e:
            return 502, {"error": str(e)}

    def _h_register(self, match, body):
        return 200, self.register_worker(body["node_id"], body["address"])

    def _h_heartbeat(self, match, body):
        with self._nodes_lock:
            entry = self.nodes.get(body["node_id"])
            if entry is None or entry.address != body.get("address", entry.address):
                entry = NodeEntry(body["node_id"], body["address"])
                self.nodes[body["node_id"]] = entry
            entry.last_heartbeat = time.time()
        return 200, {"status": "ok"}

    def _h_health(self, match, body):
        return 200, {"status": "ok", "role": "coordinator", "tables": len(self.catalog.tables())}

    def _h_console(self, match, body):
        if self.console_dir is None:
            return 404, {"error": "console assets are not configured"}
        return 200, StaticDir(self.console_dir, match.group(1) or "index.html")
