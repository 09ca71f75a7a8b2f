"""Command-line entry point: data generation, ingestion, cluster roles,
queries, an interactive shell and the benchmark harness.

Exit codes: 0 ok, 2 usage, 3 query error, 4 cluster error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .bench import WORKLOADS, BenchSpec, run_bench
from .blocks import DEFAULT_BLOCK_SIZE, NodeStore, ReplicationPolicy, StorageCluster
from .catalog import Catalog, Schema
from .decorators import (
    DecoratorConfig,
    StatsSpec,
    ViSpec,
    decorate_existing,
    parse_config_text,
    pm_spec_from_rate,
)
from .datagen import generate_csv
from .engine import LocalEngine
from .errors import ClusterError, RawDbError, SqlError
from .sql import parser as sqlparser

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_QUERY = 3
EXIT_CLUSTER = 4


def default_root() -> str:
    return os.environ.get("RAWDB_ROOT", "./rawdb-data")


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rawdb", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("datagen", help="generate a synthetic CSV of uniform integers")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--attrs", type=int, required=True)
    g.add_argument("--max-value", type=int, default=10**9)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    d = sub.add_parser("decorate", help="ingest a CSV, generating metadata alongside")
    d.add_argument("--input", required=True)
    d.add_argument("--table", required=True)
    d.add_argument("--schema", help="name:type,... (types int64|float64|text); sniffed if omitted")
    d.add_argument("--config", help="decorator config file (pm.rate, vi.attrs, ...)")
    d.add_argument("--pm-rate", default=None, help="1/k, 0 or none")
    d.add_argument("--vi-attrs", default=None, help="attr[:type],...")
    d.add_argument("--stats-attrs", default=None, help="attr,...")
    d.add_argument("--stats-precision", type=int, default=12)
    d.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    d.add_argument("--root", default=None)
    d.add_argument("--nodes", default="node0", help="comma-separated node ids")
    d.add_argument("--replication", type=int, default=1)
    d.add_argument("--coordinator", default=None, help="register with this coordinator URL")

    q = sub.add_parser("query", help="run one SQL statement")
    q.add_argument("sql")
    _query_flags(q)

    s = sub.add_parser("shell", help="interactive SQL shell")
    _query_flags(s)

    v = sub.add_parser("serve", help="run a cluster role")
    v.add_argument("--role", choices=("coordinator", "worker"), required=True)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=0)
    v.add_argument("--root", default=None)
    v.add_argument("--node-id", default="node0")
    v.add_argument("--coordinator", default=None)
    v.add_argument("--heartbeat-s", type=float, default=1.0)
    v.add_argument("--fault-injection", action="store_true")
    v.add_argument("--console-dir", default=None)

    b = sub.add_parser("bench", help="run a seeded benchmark workload")
    b.add_argument("--workload", choices=WORKLOADS, required=True)
    b.add_argument("--queries", type=int, default=10)
    b.add_argument("--rows", type=int, default=100_000)
    b.add_argument("--attrs", type=int, default=150)
    b.add_argument("--max-value", type=int, default=10**9)
    b.add_argument("--pm-rates", default="1/10,1/25,1/50,1/75,0,none")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    b.add_argument("--selectivity", type=float, default=1e-4)
    b.add_argument("--out", default=None, help="per-query CSV path")
    b.add_argument("--summary", default=None, help="summary JSON path")
    b.add_argument("--root", default=None)
    return p


def _query_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--coordinator", default=None, help="coordinator URL; local mode if absent")
    p.add_argument("--local", action="store_true", help="force single-process mode")
    p.add_argument("--root", default=None)
    p.add_argument("--use-index", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--timeout-ms", type=float, default=30_000.0)
    p.add_argument("--exact-distinct", action="store_true")


def _sniff_schema(path: str) -> Schema:
    with open(path, "rb") as f:
        first = f.readline().rstrip(b"\n").split(b",")
    attrs = []
    for i, fld in enumerate(first):
        t = "int64"
        try:
            int(fld)
        except ValueError:
            try:
                float(fld)
                t = "float64"
            except ValueError:
                t = "text"
        attrs.append(f"a{i}:{t}")
    return Schema.parse(",".join(attrs))


def _decorator_config(args) -> DecoratorConfig:
    if args.config:
        return parse_config_text(Path(args.config).read_text())
    vi = ()
    if args.vi_attrs:
        specs = []
        for part in args.vi_attrs.split(","):
            attr, _, typ = part.strip().partition(":")
            specs.append(ViSpec(int(attr), typ or "int64"))
        vi = tuple(specs)
    stats = None
    if args.stats_attrs:
        stats = StatsSpec(
            attrs=tuple(int(a) for a in args.stats_attrs.split(",")),
            precision=args.stats_precision,
        )
    return DecoratorConfig(
        pm=pm_spec_from_rate(args.pm_rate) if args.pm_rate else None,
        vi=vi,
        stats=stats,
        target_block_size=args.block_size,
    )


class RemoteClient:
    """Thin client for a running coordinator."""

    def __init__(self, url: str):
        self.url = url.rstrip("/")

    def query(self, sql: str, options: dict):
        import requests

        try:
            r = requests.post(
                f"{self.url}/v1/query", json={"sql": sql, "options": options}, timeout=300
            )
        except requests.RequestException as e:
            raise ClusterError(f"coordinator unreachable: {e}") from e
        body = r.json()
        if r.status_code != 200:
            raise SqlError(body.get("error", f"query failed with {r.status_code}"))
        return body


class LocalClient:
    def __init__(self, root: str):
        self.engine = LocalEngine(root)

    def query(self, sql: str, options: dict):
        return self.engine.query(sql, options).to_json()


def _client(args):
    if args.coordinator and not args.local:
        return RemoteClient(args.coordinator)
    return LocalClient(args.root or default_root())


def _format_table(columns, rows) -> str:
    cells = [[("" if v is None else str(v)) for v in r] for r in rows]
    widths = [len(c) for c in columns]
    for r in cells:
        for i, v in enumerate(r):
            widths[i] = max(widths[i], len(v))
    lines = [
        "  ".join(c.ljust(w) for c, w in zip(columns, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _print_result(body: dict, timing: bool) -> None:
    print(_format_table(body["columns"], body["rows"]))
    rep = body.get("report", {})
    n = len(body["rows"])
    extra = f"({n} row{'s' if n != 1 else ''}"
    if rep.get("approx"):
        extra += ", approximate"
    extra += ")"
    print(extra)
    if timing:
        print(f"Time: {rep.get('elapsed_ms', 0):.1f} ms, retries: {rep.get('retries', 0)}")


def cmd_query(args) -> int:
    client = _client(args)
    options = {
        "use_index": args.use_index,
        "timeout_ms": args.timeout_ms,
        "exact_distinct": args.exact_distinct,
    }
    t0 = time.perf_counter()
    body = client.query(args.sql, options)
    body.setdefault("report", {}).setdefault(
        "elapsed_ms", (time.perf_counter() - t0) * 1000.0
    )
    _print_result(body, timing=True)
    return EXIT_OK


def cmd_shell(args) -> int:
    try:
        import readline  # noqa: F401 - line editing when interactive
    except ImportError:
        pass
    client = _client(args)
    options = {
        "use_index": args.use_index,
        "timeout_ms": args.timeout_ms,
        "exact_distinct": args.exact_distinct,
    }
    timing = False
    interactive = sys.stdin.isatty()
    if interactive:
        print("rawdb shell; \\q quits, \\timing toggles timing, SET key = value")
    while True:
        try:
            line = input("rawdb> " if interactive else "").strip()
        except EOFError:
            return EXIT_OK
        except KeyboardInterrupt:
            print()
            continue
        if not line:
            continue
        if line in (r"\q", "exit", "quit"):
            return EXIT_OK
        if line.startswith(r"\timing"):
            arg = line.split()[1:] or ["toggle"]
            timing = {"on": True, "off": False}.get(arg[0], not timing)
            print(f"timing is {'on' if timing else 'off'}")
            continue
        try:
            stmt = sqlparser.parse(line)
            if isinstance(stmt, sqlparser.SetStatement):
                _apply_set(options, stmt)
                print(f"{stmt.key} = {stmt.value}")
                continue
            t0 = time.perf_counter()
            body = client.query(line, options)
            body.setdefault("report", {}).setdefault(
                "elapsed_ms", (time.perf_counter() - t0) * 1000.0
            )
            _print_result(body, timing)
        except ClusterError as e:
            print(f"cluster error: {e}", file=sys.stderr)
            if not interactive:
                return EXIT_CLUSTER
        except RawDbError as e:
            print(f"error: {e}", file=sys.stderr)
            if not interactive:
                return EXIT_QUERY


def _apply_set(options: dict, stmt) -> None:
    key, value = stmt.key, stmt.value.lower()
    if key == "use_index":
        if value not in ("auto", "on", "off"):
            raise SqlError("use_index must be auto, on or off")
        options["use_index"] = value
    elif key == "exact_distinct":
        options["exact_distinct"] = value in ("on", "true", "1")
    elif key == "timeout_ms":
        options["timeout_ms"] = float(value)
    elif key == "tau":
        options["tau"] = float(value)
    else:
        raise SqlError(f"unknown session option {key!r}")


def cmd_datagen(args) -> int:
    generate_csv(args.out, args.rows, args.attrs, args.max_value, args.seed)
    size = Path(args.out).stat().st_size
    print(f"wrote {args.rows} rows x {args.attrs} attrs ({size} bytes) to {args.out}")
    return EXIT_OK


def cmd_decorate(args) -> int:
    root = Path(args.root or default_root())
    node_ids = tuple(n.strip() for n in args.nodes.split(",") if n.strip())
    stores = [NodeStore(n, root / n) for n in node_ids]
    storage = StorageCluster(stores, ReplicationPolicy(args.replication, node_ids))
    catalog = Catalog(root / "_catalog")
    schema = Schema.parse(args.schema) if args.schema else _sniff_schema(args.input)
    config = _decorator_config(args)
    t0 = time.perf_counter()
    desc = decorate_existing(storage, catalog, args.input, args.table, schema, config)
    elapsed = time.perf_counter() - t0
    print(
        f"table {args.table}: {desc.record_count} records, "
        f"{len(desc.data_blocks)} data blocks, "
        f"{len(desc.pm_blocks)} pm, {len(desc.vi_blocks)} vi, "
        f"{len(desc.stats_blocks)} stats ({elapsed:.2f}s)"
    )
    if args.coordinator:
        import requests

        try:
            r = requests.post(
                f"{args.coordinator.rstrip('/')}/v1/tables", json=desc.to_json(), timeout=30
            )
            r.raise_for_status()
        except requests.RequestException as e:
            raise ClusterError(f"failed to register with coordinator: {e}") from e
        print(f"registered with {args.coordinator}")
    return EXIT_OK


def cmd_serve(args) -> int:
    root = Path(args.root or default_root())
    if args.role == "coordinator":
        from .cluster.coordinator import Coordinator

        c = Coordinator(
            root / "_catalog",
            host=args.host,
            port=args.port,
            heartbeat_s=args.heartbeat_s,
            fault_injection=args.fault_injection,
            console_dir=args.console_dir,
        ).start()
        print(f"coordinator at {c.url} (root {root})")
        _wait_forever(c.server)
        return EXIT_OK
    from .cluster.worker import Worker

    w = Worker(
        args.node_id,
        root / args.node_id,
        coordinator_url=args.coordinator,
        host=args.host,
        port=args.port,
        heartbeat_s=args.heartbeat_s,
        fault_injection=args.fault_injection,
    ).start()
    print(f"worker {args.node_id} at {w.url} (root {root / args.node_id})")
    _wait_forever(w.server)
    return EXIT_OK


def _wait_forever(server) -> None:
    try:
        while server._thread.is_alive():
            server._thread.join(1.0)
    except KeyboardInterrupt:
        server.stop()


def cmd_bench(args) -> int:
    spec = BenchSpec(
        workload=args.workload,
        queries=args.queries,
        rows=args.rows,
        attrs=args.attrs,
        max_value=args.max_value,
        pm_rates=tuple(r.strip() for r in args.pm_rates.split(",")),
        seed=args.seed,
        block_size=args.block_size,
        selectivity=args.selectivity,
    )
    root = Path(args.root or default_root())
    engine = LocalEngine(root / "bench-root")
    result = run_bench(spec, engine, root / "bench-data")
    if args.out:
        result.write_csv(args.out)
        print(f"per-query CSV: {args.out}")
    if args.summary:
        result.write_summary(args.summary)
    print(json.dumps(result.summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    handlers = {
        "datagen": cmd_datagen,
        "decorate": cmd_decorate,
        "query": cmd_query,
        "shell": cmd_shell,
        "serve": cmd_serve,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.cmd](args)
    except ClusterError as e:
        print(f"cluster error: {e}", file=sys.stderr)
        return EXIT_CLUSTER
    except RawDbError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_QUERY
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_QUERY


if __name__ == "__main__":
    sys.exit(main())
