"""Write-side pipeline: one pass over output tuples produces record-aligned
data blocks plus, per block, a positional map, a vertical index and
cardinality statistics.

Each decorator observes every tuple exactly once, in write order. The data
bytes produced are identical whether or not any decorator is configured.
Blocks are sealed only between tuples, so readers never see a partial record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .blocks import (
    DEFAULT_BLOCK_SIZE,
    KIND_DATA,
    KIND_PM,
    KIND_STATS,
    KIND_VI,
    BlockMeta,
    RecordTooLargeError,
    StorageCluster,
    iter_record_chunks,
)
from .catalog import Catalog, Schema, TableDescriptor, TYPE_FLOAT64, TYPE_INT64
from .errors import ConfigError, IngestError, StorageError
from .metadata import (
    KEY_FLOAT64,
    KEY_INT64,
    HllSketch,
    PositionalMap,
    TableStatistics,
    VerticalIndex,
    pm_encode,
    stats_encode,
    stats_merge,
    vi_encode,
)


@dataclass(frozen=True)
class PmSpec:
    """Which attribute positions the positional map stores.

    ``rate_k`` of k >= 1 samples attributes {0, k, 2k, ...}; 0 keeps row
    lengths only. Alternatively name the sampled set directly via ``attrs``;
    a rate and its equivalent explicit set produce identical files.
    """

    rate_k: int | None = None
    attrs: tuple[int, ...] | None = None

    def __post_init__(self):
        if (self.rate_k is None) == (self.attrs is None):
            raise ConfigError("positional map needs exactly one of rate or attrs")
        if self.rate_k is not None and self.rate_k < 0:
            raise ConfigError("sampling rate denominator must be >= 0")
        if self.attrs is not None:
            object.__setattr__(self, "attrs", tuple(sorted(set(self.attrs))))

    def sampled(self, arity: int) -> tuple[int, ...]:
        if self.attrs is not None:
            return self.attrs
        if self.rate_k == 0:
            return ()
        return tuple(range(0, arity, self.rate_k))


@dataclass(frozen=True)
class ViSpec:
    attr: int
    type: str = KEY_INT64


@dataclass(frozen=True)
class StatsSpec:
    attrs: tuple[int, ...] = ()
    precision: int = 12


@dataclass(frozen=True)
class DecoratorConfig:
    pm: PmSpec | None = None
    vi: tuple[ViSpec, ...] = ()
    stats: StatsSpec | None = None
    target_block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        object.__setattr__(self, "vi", tuple(self.vi))
        if self.target_block_size < 2 or self.target_block_size >= 2**32:
            raise ConfigError("target block size out of range")

    def validate_for(self, schema: Schema) -> None:
        arity = schema.arity
        if self.pm is not None:
            for a in self.pm.sampled(arity):
                if not 0 <= a < arity:
                    raise ConfigError(f"positional map attribute {a} outside schema of {arity}")
        if len(self.vi) > 1:
            raise ConfigError("at most one vertical index key attribute is supported")
        for v in self.vi:
            if not 0 <= v.attr < arity:
                raise ConfigError(f"vertical index attribute {v.attr} outside schema of {arity}")
            if v.type not in (KEY_INT64, KEY_FLOAT64):
                raise ConfigError(f"vertical index key type {v.type!r} is not numeric")
            declared = schema.attrs[v.attr].type
            if declared not in (TYPE_INT64, TYPE_FLOAT64):
                raise ConfigError(
                    f"vertical index attribute {v.attr} has non-numeric type {declared!r}"
                )
        if self.stats is not None:
            for a in self.stats.attrs:
                if not 0 <= a < arity:
                    raise ConfigError(f"statistics attribute {a} outside schema of {arity}")
            if not 4 <= self.stats.precision <= 16:
                raise ConfigError("statistics precision must be in 4..16")


def parse_config_text(text: str) -> DecoratorConfig:
    """Parse the key-value decorator configuration format.

    Keys: pm.rate (``1/k``, ``0`` or ``none``), pm.attrs, vi.attrs
    (``attr[:type]`` list), stats.attrs, stats.precision, block.size.
    ``#`` starts a comment.
    """
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v

    known = {"pm.rate", "pm.attrs", "vi.attrs", "stats.attrs", "stats.precision", "block.size"}
    for k in kv:
        if k not in known:
            raise ConfigError(f"unknown configuration key {k!r}")

    pm = None
    if "pm.rate" in kv and "pm.attrs" in kv:
        raise ConfigError("pm.rate and pm.attrs are mutually exclusive")
    if "pm.rate" in kv:
        pm = pm_spec_from_rate(kv["pm.rate"])
    elif "pm.attrs" in kv:
        pm = PmSpec(attrs=tuple(int(s) for s in kv["pm.attrs"].split(",") if s.strip()))

    vi = []
    if "vi.attrs" in kv:
        for part in kv["vi.attrs"].split(","):
            part = part.strip()
            if not part:
                continue
            attr, _, typ = part.partition(":")
            vi.append(ViSpec(int(attr), typ.strip() or KEY_INT64))

    stats = None
    if "stats.attrs" in kv:
        stats = StatsSpec(
            attrs=tuple(int(s) for s in kv["stats.attrs"].split(",") if s.strip()),
            precision=int(kv.get("stats.precision", "12")),
        )
    elif "stats.precision" in kv:
        raise ConfigError("stats.precision given without stats.attrs")

    return DecoratorConfig(
        pm=pm,
        vi=tuple(vi),
        stats=stats,
        target_block_size=int(kv.get("block.size", DEFAULT_BLOCK_SIZE)),
    )


def pm_spec_from_rate(text: str) -> PmSpec | None:
    """``1/k`` or ``0`` or ``none`` to a PmSpec (``none`` -> no map at all)."""
    t = text.strip().lower()
    if t in ("none", ""):
        return None
    if t == "0":
        return PmSpec(rate_k=0)
    if t.startswith("1/"):
        return PmSpec(rate_k=int(t[2:]))
    k = float(t)
    if k <= 0 or k > 1:
        raise ConfigError(f"sampling rate {text!r} not in (0, 1]")
    return PmSpec(rate_k=round(1 / k))


class _TableBuilder:
    """Accumulates sealed blocks and registers the table atomically at close."""

    def __init__(
        self,
        storage: StorageCluster,
        catalog: Catalog,
        table: str,
        schema: Schema,
        config: DecoratorConfig,
    ):
        config.validate_for(schema)
        if table in catalog.tables():
            raise StorageError(f"table {table!r} already exists")
        for store in storage.nodes.values():
            if (store.root / table).exists():
                raise StorageError(f"stale block files for {table!r} on {store.node_id}")
        self.storage = storage
        self.catalog = catalog
        self.table = table
        self.schema = schema
        self.config = config
        self.data: list[BlockMeta] = []
        self.pm: list[BlockMeta] = []
        self.vi: list[BlockMeta] = []
        self.stats: list[BlockMeta] = []
        self.block_stats: list[TableStatistics] = []
        self.vi_nan_skipped = 0

    def seal(
        self,
        data: bytes,
        record_count: int,
        pm: PositionalMap | None,
        vi: VerticalIndex | None,
        stats: TableStatistics | None,
    ) -> None:
        ordinal = len(self.data)
        primary = self.storage.default_primary(ordinal)
        self.data.append(
            self.storage.put_block(self.table, KIND_DATA, ordinal, data, primary, record_count)
        )
        if pm is not None:
            self.pm.append(
                self.storage.put_block(self.table, KIND_PM, ordinal, pm_encode(pm), primary)
            )
        if vi is not None:
            self.vi.append(
                self.storage.put_block(self.table, KIND_VI, ordinal, vi_encode(vi), primary)
            )
        if stats is not None:
            self.stats.append(
                self.storage.put_block(self.table, KIND_STATS, ordinal, stats_encode(stats), primary)
            )
            self.block_stats.append(stats)

    def finish(self) -> TableDescriptor:
        merged = None
        if self.config.stats is not None:
            if self.block_stats:
                merged = stats_merge(self.block_stats)
            else:
                merged = TableStatistics(
                    0, {a: HllSketch(self.config.stats.precision) for a in self.config.stats.attrs}
                )
        desc = TableDescriptor(
            name=self.table,
            schema=self.schema,
            data_blocks=self.data,
            pm_blocks=self.pm,
            vi_blocks=self.vi,
            stats_blocks=self.stats,
            key_attrs=tuple(v.attr for v in self.config.vi),
            stats=merged,
        )
        try:
            self.catalog.register(desc)
        except Exception:
            self.abort()
            raise
        return desc

    def abort(self) -> None:
        self.storage.delete_table(self.table)


class DecoratedWriter:
    """Single-writer sink consuming tuples once, in order.

    The positional map decorator runs first because it derives the serialized
    row that every later stage and the data sink reuse.
    """

    def __init__(
        self,
        storage: StorageCluster,
        catalog: Catalog,
        table: str,
        schema: Schema,
        config: DecoratorConfig,
    ):
        self._builder = _TableBuilder(storage, catalog, table, schema, config)
        self.schema = schema
        self.config = config
        self.sampled = config.pm.sampled(schema.arity) if config.pm else None
        self.closed = False
        self._rows_written = 0
        self._reset_block()

    def _reset_block(self) -> None:
        self._data = bytearray()
        self._records = 0
        self._pm_offsets: list[int] = []
        self._pm_row_lens: list[int] = []
        self._vi_keys: list = []
        self._vi_offsets: list[int] = []
        if self.config.stats is not None:
            self._sketches = {
                a: HllSketch(self.config.stats.precision) for a in self.config.stats.attrs
            }

    @property
    def vi_nan_skipped(self) -> int:
        return self._builder.vi_nan_skipped

    def write_tuple(self, values: Sequence[str | bytes]) -> None:
        if self.closed:
            raise IngestError("writer is closed")
        row_no = self._rows_written + 1
        if len(values) != self.schema.arity:
            self._builder.abort()
            raise IngestError(
                f"row {row_no}: arity {len(values)} does not match schema of {self.schema.arity}"
            )
        vals = [v if isinstance(v, bytes) else v.encode() for v in values]
        line = b",".join(vals)
        if line.count(b",") != len(vals) - 1 or b"\n" in line:
            self._builder.abort()
            raise IngestError(f"row {row_no}: attribute contains a separator or terminator")
        record = line + b"\n"
        if len(record) > self.config.target_block_size:
            self._builder.abort()
            raise RecordTooLargeError(
                f"row {row_no}: record of {len(record)} bytes exceeds block size "
                f"{self.config.target_block_size}"
            )
        if self._data and len(self._data) + len(record) > self.config.target_block_size:
            self._seal()

        row_start = len(self._data)
        if self.sampled is not None:
            # running offset of each attribute's first byte within the row
            pos = 0
            lens = [len(v) for v in vals]
            acc = [0] * len(vals)
            for i in range(1, len(vals)):
                pos += lens[i - 1] + 1
                acc[i] = pos
            self._pm_offsets.extend(acc[a] for a in self.sampled)
            self._pm_row_lens.append(len(line))
        for spec in self.config.vi:
            raw = vals[spec.attr]
            if spec.type == KEY_INT64:
                key = kernels.parse_int_strict(raw)
            else:
                key = kernels.parse_float_strict(raw)
            if key is None:
                self._builder.abort()
                raise IngestError(
                    f"row {row_no}: attribute {spec.attr} value {raw!r} is not a valid {spec.type} key"
                )
            if spec.type == KEY_FLOAT64 and math.isnan(key):
                self._builder.vi_nan_skipped += 1
            else:
                self._vi_keys.append(key)
                self._vi_offsets.append(row_start)
        if self.config.stats is not None:
            for a in self.config.stats.attrs:
                self._sketches[a].insert(vals[a])

        self._data += record
        self._records += 1
        self._rows_written += 1

    def _seal(self) -> None:
        pm = vi = stats = None
        if self.sampled is not None:
            pm = PositionalMap(
                attr_count=self.schema.arity,
                sampled_attrs=self.sampled,
                offsets=np.array(self._pm_offsets, dtype=np.uint32).reshape(
                    self._records, len(self.sampled)
                ),
                row_lens=np.array(self._pm_row_lens, dtype=np.uint32),
            )
        for spec in self.config.vi:
            vi = VerticalIndex(
                key_attr=spec.attr,
                key_type=spec.type,
                keys=np.array(
                    self._vi_keys, dtype=np.int64 if spec.type == KEY_INT64 else np.float64
                ),
                row_offsets=np.array(self._vi_offsets, dtype=np.uint64),
            )
        if self.config.stats is not None:
            stats = TableStatistics(self._records, {a: s for a, s in self._sketches.items()})
        self._builder.seal(bytes(self._data), self._records, pm, vi, stats)
        self._reset_block()

    def close(self) -> TableDescriptor:
        if self.closed:
            raise IngestError("writer already closed")
        self.closed = True
        try:
            if self._data:
                self._seal()
            return self._builder.finish()
        except Exception:
            self._builder.abort()
            raise


def open_decorated_writer(
    storage: StorageCluster,
    catalog: Catalog,
    table: str,
    schema: Schema,
    config: DecoratorConfig,
) -> DecoratedWriter:
    return DecoratedWriter(storage, catalog, table, schema, config)


def decorate_existing(
    storage: StorageCluster,
    catalog: Catalog,
    csv_path: Path | str,
    table: str,
    schema: Schema,
    config: DecoratorConfig,
) -> TableDescriptor:
    """Ingest an existing CSV file, producing the same blocks and metadata as
    streaming every row through a decorated writer.

    Data blocks are byte-identical to the source file; reassembling them in
    ordinal order reproduces it exactly. Works block-at-a-time with
    vectorized tokenization, so it is the fast path for bulk files.
    """
    builder = _TableBuilder(storage, catalog, table, schema, config)
    arity = schema.arity
    sampled = config.pm.sampled(arity) if config.pm else None
    vi_spec = config.vi[0] if config.vi else None
    rows_before = 0
    try:
        with open(csv_path, "rb") as f:
            for chunk in iter_record_chunks(f, config.target_block_size):
                buf = kernels.as_buffer(chunk)
                starts, ends = kernels.row_geometry(buf)
                commas = kernels.comma_positions(buf)
                base = np.searchsorted(commas, starts)
                counts = np.searchsorted(commas, ends) - base
                bad = np.flatnonzero(counts != arity - 1)
                if len(bad):
                    r = rows_before + int(bad[0]) + 1
                    raise IngestError(
                        f"row {r}: found {int(counts[bad[0]]) + 1} attributes, schema has {arity}"
                    )

                pm = vi = stats = None
                if sampled is not None:
                    offs = np.empty((len(starts), len(sampled)), dtype=np.uint32)
                    for k, a in enumerate(sampled):
                        if a == 0:
                            offs[:, k] = 0
                        else:
                            offs[:, k] = commas[base + a - 1] + 1 - starts
                    pm = PositionalMap(
                        attr_count=arity,
                        sampled_attrs=sampled,
                        offsets=offs,
                        row_lens=(ends - starts).astype(np.uint32),
                    )
                if vi_spec is not None:
                    vi = _build_vi_chunk(
                        buf, starts, ends, commas, base, arity, vi_spec, rows_before, builder
                    )
                if config.stats is not None:
                    sketches = {}
                    for a in config.stats.attrs:
                        fs = starts if a == 0 else commas[base + a - 1] + 1
                        fe = ends if a == arity - 1 else commas[base + a]
                        sketches[a] = _sketch_fields(buf, fs, fe, config.stats.precision)
                    stats = TableStatistics(len(starts), sketches)

                builder.seal(chunk, len(starts), pm, vi, stats)
                rows_before += len(starts)
        return builder.finish()
    except Exception:
        builder.abort()
        raise


def _build_vi_chunk(buf, starts, ends, commas, base, arity, spec, rows_before, builder):
    fs = starts if spec.attr == 0 else commas[base + spec.attr - 1] + 1
    fe = ends if spec.attr == arity - 1 else commas[base + spec.attr]
    if spec.type == KEY_INT64:
        vals, good = kernels.parse_int64_at(buf, fs)
        vals = vals.copy()
        for i in np.flatnonzero(~good):
            v = kernels.parse_int_strict(buf[fs[i] : fe[i]].tobytes())
            if v is None:
                raise IngestError(
                    f"row {rows_before + int(i) + 1}: attribute {spec.attr} is not a valid int64 key"
                )
            vals[i] = v
        return VerticalIndex(spec.attr, spec.type, vals, starts.astype(np.uint64))
    keys = []
    offs = []
    for i in range(len(starts)):
        v = kernels.parse_float_strict(buf[fs[i] : fe[i]].tobytes())
        if v is None:
            raise IngestError(
                f"row {rows_before + i + 1}: attribute {spec.attr} is not a valid float64 key"
            )
        if math.isnan(v):
            builder.vi_nan_skipped += 1
            continue
        keys.append(v)
        offs.append(int(starts[i]))
    return VerticalIndex(
        spec.attr, spec.type, np.array(keys, dtype=np.float64), np.array(offs, dtype=np.uint64)
    )


def _sketch_fields(buf, fs, fe, precision) -> HllSketch:
    sk = HllSketch(precision)
    widths = (fe - fs).astype(np.int64)
    cap = int(widths.max()) if len(widths) else 0
    if cap > 0:
        mat = kernels.gather(buf, fs, cap)
        sk.insert_hashes(kernels.hash64_many(mat, widths))
    elif len(widths):
        # all-empty fields still count as one distinct value
        sk.insert_hashes(kernels.hash64_many(np.zeros((len(widths), 1), np.uint8), widths))
    return sk
