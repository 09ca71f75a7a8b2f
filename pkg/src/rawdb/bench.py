"""Benchmark harness: seeded workloads, correctness-gated timing runs.

Workloads mirror the exploration patterns the engine targets: random
select-project probes (positional-map stress), key-attribute probes
(vertical-index stress), sampling-rate sweeps, attribute/size scaling,
break-even accounting, top-k and a two-table join. Every workload validates
its configured run against a no-metadata baseline before anything is timed.

Output CSV schema (one row per query, stable):
    workload, config, query_index, sql, latency_ms, retries, result_rows,
    rows_examined, rows_emitted, bytes_located, conversions, pm_hits,
    pm_misses, parse_errors
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import DEFAULT_BLOCK_SIZE
from .catalog import Schema
from .datagen import generate_csv, rows_for_size
from .decorators import DecoratorConfig, PmSpec, StatsSpec, ViSpec, pm_spec_from_rate
from .engine import LocalEngine, QueryResult
from .errors import RawDbError

WORKLOADS = (
    "random_pm",
    "key_vi",
    "break_even",
    "attr_scaling",
    "size_scaling",
    "pm_rate_sweep",
    "topk",
    "join",
)

CSV_FIELDS = [
    "workload", "config", "query_index", "sql", "latency_ms", "retries",
    "result_rows", "rows_examined", "rows_emitted", "bytes_located",
    "conversions", "pm_hits", "pm_misses", "parse_errors",
]


@dataclass
class BenchSpec:
    workload: str
    queries: int = 10
    rows: int = 100_000
    attrs: int = 150
    max_value: int = 10**9
    pm_rates: tuple[str, ...] = ("1/10", "1/25", "1/50", "1/75", "0", "none")
    seed: int = 0
    block_size: int = DEFAULT_BLOCK_SIZE
    selectivity: float = 1e-4
    sizes_gb: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    attr_points: tuple[int, ...] = (25, 150, 200)
    validate: bool = True

    def __post_init__(self):
        if self.workload not in WORKLOADS:
            raise RawDbError(f"unknown workload {self.workload!r}; one of {WORKLOADS}")

    @property
    def predicate_constant(self) -> int:
        # uniform [0, max): constant c gives selectivity c / max
        return max(1, int(self.selectivity * self.max_value))


@dataclass
class BenchResult:
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: r.get(k, "") for k in CSV_FIELDS})

    def write_summary(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.summary, indent=2, sort_keys=True))


def table_config(rate: str | None, block_size: int, vi: bool = False,
                 stats: tuple[int, ...] = ()) -> DecoratorConfig:
    return DecoratorConfig(
        pm=pm_spec_from_rate(rate) if rate is not None else None,
        vi=(ViSpec(0, "int64"),) if vi else (),
        stats=StatsSpec(attrs=stats) if stats else None,
        target_block_size=block_size,
    )


def ensure_dataset(workdir: Path, rows: int, attrs: int, max_value: int, seed: int) -> Path:
    path = Path(workdir) / f"data_r{rows}_a{attrs}_m{max_value}_s{seed}.csv"
    if not path.exists():
        generate_csv(path, rows, attrs, max_value, seed)
    return path


def schema_for_csv(csv_path: Path) -> Schema:
    with open(csv_path, "rb") as f:
        first = f.readline()
    return Schema.uniform(first.count(b",") + 1)


def ensure_table(
    engine: LocalEngine, csv_path: Path, name: str, config: DecoratorConfig
):
    if name in engine.catalog.tables():
        return engine.catalog.get(name)
    return engine.ingest(csv_path, name, schema_for_csv(csv_path), config)


def _timed(engine: LocalEngine, sql: str, options=None) -> tuple[QueryResult, float]:
    t0 = time.perf_counter()
    r = engine.query(sql, options)
    return r, (time.perf_counter() - t0) * 1000.0


def _record(workload, config, i, sql, latency, result: QueryResult) -> dict:
    rep = result.report
    return {
        "workload": workload,
        "config": config,
        "query_index": i,
        "sql": sql,
        "latency_ms": round(latency, 3),
        "retries": rep.retries,
        "result_rows": len(result.rows),
        **rep.counters.to_json(),
    }


def _gate(results_a: list, results_b: list, what: str) -> None:
    for i, (a, b) in enumerate(zip(results_a, results_b)):
        if a != b:
            raise RawDbError(
                f"correctness gate failed for {what}, query {i}: "
                f"{len(a)} vs {len(b)} rows"
            )


def random_queries(spec: BenchSpec, attrs: int | None = None) -> list[str]:
    rng = np.random.default_rng(spec.seed + 1)
    n = attrs or spec.attrs
    out = []
    for _ in range(spec.queries):
        ax, ay = int(rng.integers(0, n)), int(rng.integers(0, n))
        out.append((ax, ay))
    return out


def _sql_random(table: str, ax: int, ay: int, c: int) -> str:
    return f"select a{ax} from {table} where a{ay} < {c}"


# ---- workloads ----------------------------------------------------------------


def bench_random_pm(spec: BenchSpec, engine: LocalEngine, workdir: Path) -> BenchResult:
    """Random select-project probes, decorated vs no-metadata baseline."""
    src = ensure_dataset(workdir, spec.rows, spec.attrs, spec.max_value, spec.seed)
    rate = spec.pm_rates[0]
    t_pm = ensure_table(engine, src, f"rbench_pm", table_config(rate, spec.block_size))
    t_none = ensure_table(engine, src, f"rbench_none", table_config(None, spec.block_size))
    qs = random_queries(spec)
    c = spec.predicate_constant

    res = BenchResult()
    results = {"pm": [], "none": []}
    for name, table in (("pm", "rbench_pm"), ("none", "rbench_none")):
        config = f"pm={rate}" if name == "pm" else "pm=none"
        for i, (ax, ay) in enumerate(qs):
            sql = _sql_random(table, ax, ay, c)
            r, ms = _timed(engine, sql)
            results[name].append(r.rows)
            res.records.append(_record("random_pm", config, i, sql, ms, r))
    if spec.validate:
        _gate(results["pm"], results["none"], "random_pm pm vs baseline")
    agg = {
        k: sum(r["latency_ms"] for r in res.records if r["config"].endswith(cfg))
        for k, cfg in (("pm_ms", rate), ("none_ms", "none"))
    }
    agg["ratio_pm_over_none"] = agg["pm_ms"] / agg["none_ms"] if agg["none_ms"] else None
    res.summary = agg
    return res


def bench_key_vi(spec: BenchSpec, engine: LocalEngine, workdir: Path) -> BenchResult:
    """Probes on the key attribute: index path vs forced full scans."""
    src = ensure_dataset(workdir, spec.rows, spec.attrs, spec.max_value, spec.seed)
    ensure_table(
        engine, src, "kbench",
        table_config(spec.pm_rates[0], spec.block_size, vi=True, stats=(0,)),
    )
    rng = np.random.default_rng(spec.seed + 2)
    c = spec.predicate_constant
    res = BenchResult()
    results = {"index": [], "full": []}
    axs = [int(rng.integers(0, spec.attrs)) for _ in range(spec.queries)]
    for mode, opts in (("index", {"use_index": "auto"}), ("full", {"use_index": "off"})):
        for i, ax in enumerate(axs):
            sql = f"select a{ax} from kbench where a0 < {c}"
            r, ms = _timed(engine, sql, opts)
            results[mode].append(r.rows)
            res.records.append(_record("key_vi", mode, i, sql, ms, r))
    if spec.validate:
        _gate(results["index"], results["full"], "key_vi index vs full")
    idx = [r for r in res.records if r["config"] == "index"]
    full = [r for r in res.records if r["config"] == "full"]
    total_rows = spec.rows * spec.queries
    res.summary = {
        "index_ms": sum(r["latency_ms"] for r in idx),
        "full_ms": sum(r["latency_ms"] for r in full),
        "index_rows_examined_fraction": sum(r["rows_examined"] for r in idx) / total_rows,
        "latency_ratio_index_over_full": (
            sum(r["latency_ms"] for r in idx) / sum(r["latency_ms"] for r in full)
        ),
    }
    return res


def bench_pm_rate_sweep(spec: BenchSpec, engine: LocalEngine, workdir: Path) -> BenchResult:
    """Same query set across sampling rates; reports located-bytes per rate."""
    src = ensure_dataset(workdir, spec.rows, spec.attrs, spec.max_value, spec.seed)
    qs = random_queries(spec)
    c = spec.predicate_constant
    res = BenchResult()
    per_rate = {}
    baseline_rows = None
    for rate in spec.pm_rates:
        tbl = f"sweep_{rate.replace('/', '_')}"
        ensure_table(engine, src, tbl, table_config(None if rate == "none" else rate,
                                                    spec.block_size))
        rows_seen = []
        for i, (ax, ay) in enumerate(qs):
            sql = _sql_random(tbl, ax, ay, c)
            r, ms = _timed(engine, sql)
            rows_seen.append(r.rows)
            res.records.append(_record("pm_rate_sweep", f"pm={rate}", i, sql, ms, r))
        if baseline_rows is None:
            baseline_rows = rows_seen
        elif spec.validate:
            _gate(rows_seen, baseline_rows, f"pm_rate_sweep rate {rate}")
        per_rate[rate] = sum(
            r["bytes_located"] for r in res.records if r["config"] == f"pm={rate}"
        )
    weakest_first = list(reversed(spec.pm_rates))
    res.summary = {
        "bytes_located_by_rate": per_rate,
        "monotone_non_increasing": all(
            per_rate[a] >= per_rate[b] for a, b in zip(weakest_first, weakest_first[1:])
        ),
    }
    return res


def bench_attr_scaling(spec: BenchSpec, engine: LocalEngine, workdir: Path) -> BenchResult:
    """Average latency as arity grows, with and without a positional map."""
    res = BenchResult()
    points = {}
    for attrs in spec.attr_points:
        src = ensure_dataset(workdir, spec.rows, attrs, spec.max_value, spec.seed)
        for rate, cfgname in ((spec.pm_rates[0], "pm"), (None, "none")):
            tbl = f"ascale_{attrs}_{cfgname}"
            ensure_table(engine, src, tbl, table_config(rate, spec.block_size))
            lat = []
            for i, (ax, ay) in enumerate(random_queries(spec, attrs)):
                sql = _sql_random(tbl, ax, ay, spec.predicate_constant)
                r, ms = _timed(engine, sql)
                lat.append(ms)
                res.records.append(
                    _record("attr_scaling", f"attrs={attrs},{cfgname}", i, sql, ms, r)
                )
            points[f"{attrs}:{cfgname}"] = sum(lat) / len(lat)
    res.summary = {"avg_latency_ms": points}
    return res


def bench_size_scaling(spec: BenchSpec, engine: LocalEngine, workdir: Path) -> BenchResult:
    """Average latency against dataset size, plus a linear-fit quality score."""
    res = BenchResult()
    sizes = []
    lats = []
    for gb in spec.sizes_gb:
        rows = rows_for_size(int(gb * 1e9), spec.attrs, spec.max_value)
        src = ensure_dataset(workdir, rows, spec.attrs, spec.max_value, spec.seed)
        tbl = f"sscale_{int(gb * 100)}"
        ensure_table(engine, src, tbl, table_config(spec.pm_rates[0], spec.block_size))
        lat = []
        for i, (ax, ay) in enumerate(random_queries(spec)):
            sql = _sql_random(tbl, ax, ay, spec.predicate_constant)
            r, ms = _timed(engine, sql)
            lat.append(ms)
            res.records.append(
                _record("size_scaling", f"gb={gb}", i, sql, ms, r)
            )
        sizes.append(src.stat().st_size)
        lats.append(sum(lat) / len(lat))
        engine.drop(tbl)
    x, y = np.array(sizes, dtype=float), np.array(lats, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    res.summary = {
        "sizes_bytes": [int(s) for s in sizes],
        "avg_latency_ms": [float(l) for l in lats],
        "r_squared": 1.0 - ss_res / ss_tot if ss_tot else 1.0,
        "slope_ms_per_gb": slope * 1e9,
    }
    return res


def bench_break_even(spec: BenchSpec, engine: LocalEngine, workdir: Path) -> BenchResult:
    """Cumulative cost of querying raw data vs paying metadata generation first."""
    src = ensure_dataset(workdir, spec.rows, spec.attrs, spec.max_value, spec.seed)
    t0 = time.perf_counter()
    ensure_table(engine, src, "be_none", table_config(None, spec.block_size))
    plain_prep_ms = (time.perf_counter() - t0) * 1000.0
    t0 = time.perf_counter()
    ensure_table(
        engine, src, "be_deco",
        table_config(spec.pm_rates[0], spec.block_size, vi=True, stats=(0,)),
    )
    deco_prep_ms = (time.perf_counter() - t0) * 1000.0

    qs = random_queries(spec)
    c = spec.predicate_constant
    res = BenchResult()
    cum = {"be_none": plain_prep_ms, "be_deco": deco_prep_ms}
    crossover = None
    results = {"be_none": [], "be_deco": []}
    for i, (ax, ay) in enumerate(qs):
        for tbl in ("be_none", "be_deco"):
            sql = _sql_random(tbl, ax, ay, c)
            r, ms = _timed(engine, sql)
            cum[tbl] += ms
            results[tbl].append(r.rows)
            rec = _record("break_even", tbl.removeprefix("be_"), i, sql, ms, r)
            rec["cumulative_ms"] = round(cum[tbl], 3)
            res.records.append(rec)
        if crossover is None and cum["be_deco"] < cum["be_none"]:
            crossover = i + 1
    if spec.validate:
        _gate(results["be_none"], results["be_deco"], "break_even")
    res.summary = {
        "prep_ms": {"none": plain_prep_ms, "decorated": deco_prep_ms},
        "cumulative_ms": {k.removeprefix("be_"): v for k, v in cum.items()},
        "break_even_query": crossover,
    }
    return res


def bench_topk(spec: BenchSpec, engine: LocalEngine, workdir: Path) -> BenchResult:
    """Top-10 probes ordered by a random attribute."""
    src = ensure_dataset(workdir, spec.rows, spec.attrs, spec.max_value, spec.seed)
    ensure_table(engine, src, "topk_pm", table_config(spec.pm_rates[0], spec.block_size))
    ensure_table(engine, src, "topk_none", table_config(None, spec.block_size))
    rng = np.random.default_rng(spec.seed + 3)
    axs = [int(rng.integers(1, spec.attrs)) for _ in range(spec.queries)]
    res = BenchResult()
    results = {"topk_pm": [], "topk_none": []}
    for tbl in ("topk_pm", "topk_none"):
        for i, ax in enumerate(axs):
            sql = f"select a0, a{ax} from {tbl} order by a{ax} desc limit 10"
            r, ms = _timed(engine, sql)
            results[tbl].append(r.rows)
            res.records.append(
                _record("topk", tbl.removeprefix("topk_"), i, sql, ms, r)
            )
    if spec.validate:
        _gate(results["topk_pm"], results["topk_none"], "topk")
    res.summary = {
        "pm_ms": sum(r["latency_ms"] for r in res.records if r["config"] == "pm"),
        "none_ms": sum(r["latency_ms"] for r in res.records if r["config"] == "none"),
    }
    return res


def bench_join(spec: BenchSpec, engine: LocalEngine, workdir: Path) -> BenchResult:
    """Two-table workload: filtered small side joined against the large side."""
    big_src = ensure_dataset(workdir, spec.rows, 10, spec.max_value, spec.seed)
    small_rows = max(spec.rows // 100, 10)
    small_src = ensure_dataset(workdir, small_rows, 4, spec.max_value, spec.seed + 9)
    ensure_table(
        engine, big_src, "jbig",
        table_config(spec.pm_rates[0], spec.block_size, stats=(0, 1)),
    )
    ensure_table(
        engine, small_src, "jsmall",
        table_config(spec.pm_rates[0], spec.block_size, stats=(0,)),
    )
    res = BenchResult()
    c = spec.predicate_constant
    rng = np.random.default_rng(spec.seed + 4)
    for i in range(spec.queries):
        lo = int(rng.integers(0, spec.max_value // 2))
        sql = (
            f"select count(*) from jbig join jsmall on jbig.a1 = jsmall.a0 "
            f"where jbig.a2 < {c + lo} and jbig.a2 >= {lo}"
        )
        r, ms = _timed(engine, sql)
        res.records.append(_record("join", "broadcast", i, sql, ms, r))
    res.summary = {"total_ms": sum(r["latency_ms"] for r in res.records)}
    return res


_RUNNERS = {
    "random_pm": bench_random_pm,
    "key_vi": bench_key_vi,
    "pm_rate_sweep": bench_pm_rate_sweep,
    "attr_scaling": bench_attr_scaling,
    "size_scaling": bench_size_scaling,
    "break_even": bench_break_even,
    "topk": bench_topk,
    "join": bench_join,
}


def run_bench(spec: BenchSpec, engine: LocalEngine, workdir: Path | str) -> BenchResult:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    return _RUNNERS[spec.workload](spec, engine, workdir)
