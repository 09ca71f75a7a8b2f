"""Block-level in-situ execution.

Navigation uses sampled positional-map offsets as anchor points: a requested
attribute is reached by counting separators forward from the greatest anchor
at or below it, or backward from the least anchor above it when strictly
nearer (ties prefer the earlier anchor). Value conversion is deferred until a
row is known to qualify; offsets learned while navigating are written into a
node-resident cache so later scans skip the work.

Counters measure the tokenization model, not the physical kernel:
``bytes_located`` is the number of bytes a character-level scanner would
examine navigating between anchors and attributes, identical for the
vectorized and scalar kernels. ``conversions`` counts projected values
materialized into output rows.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, fields as dc_fields
from typing import Iterable, Mapping

import numpy as np

from . import kernels
from .catalog import TYPE_FLOAT64, TYPE_INT64, TYPE_TEXT
from .errors import MetadataInconsistencyError
from .metadata import PositionalMap, VerticalIndex

log = logging.getLogger(__name__)

OPS = ("<", "<=", ">", ">=", "=", "!=")

ACCESS_FULL = "full"
ACCESS_INDEX = "index"


@dataclass(frozen=True)
class Comparison:
    attr: int
    op: str
    value: int | float | str

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown comparison operator {self.op!r}")

    def to_json(self) -> dict:
        return {"attr": self.attr, "op": self.op, "value": self.value}

    @classmethod
    def from_json(cls, d: dict) -> "Comparison":
        return cls(d["attr"], d["op"], d["value"])


@dataclass(frozen=True)
class ScanRequest:
    table: str
    ordinal: int
    projection: tuple[int, ...]
    predicate: tuple[Comparison, ...] = ()
    access: str = ACCESS_FULL
    limit: int | None = None

    def to_json(self) -> dict:
        return {
            "table": self.table,
            "ordinal": self.ordinal,
            "projection": list(self.projection),
            "predicate": [c.to_json() for c in self.predicate],
            "access": self.access,
            "limit": self.limit,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ScanRequest":
        return cls(
            table=d["table"],
            ordinal=d["ordinal"],
            projection=tuple(d["projection"]),
            predicate=tuple(Comparison.from_json(c) for c in d["predicate"]),
            access=d.get("access", ACCESS_FULL),
            limit=d.get("limit"),
        )


@dataclass
class ScanCounters:
    rows_examined: int = 0
    rows_emitted: int = 0
    bytes_located: int = 0
    conversions: int = 0
    pm_hits: int = 0
    pm_misses: int = 0
    parse_errors: int = 0

    def add(self, other: "ScanCounters") -> "ScanCounters":
        for f in dc_fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_json(cls, d: dict) -> "ScanCounters":
        return cls(**{f.name: d.get(f.name, 0) for f in dc_fields(cls)})


def locate_attr(
    row: bytes,
    target: int,
    anchors: Mapping[int, int] | None = None,
    arity: int | None = None,
) -> int:
    """Byte offset of ``target``'s first data byte within one record.

    ``row`` carries no terminator. Sampled anchors give O(1) lookups;
    otherwise separators are counted from the nearest anchor (attribute 0 is
    always an implicit anchor at offset 0).
    """
    if arity is not None and not 0 <= target < arity:
        raise ValueError(f"attribute {target} outside arity {arity}")
    amap = {0: 0}
    if anchors:
        amap.update(anchors)
    if target in amap:
        return amap[target]
    below = max(a for a in amap if a < target)
    above = min((a for a in amap if a > target), default=None)
    if above is not None and (above - target) < (target - below):
        pos = amap[above] - 1  # separator right before the anchor attribute
        for _ in range(above - target):
            pos = row.rindex(b",", 0, pos)
        return pos + 1
    pos = amap[below]
    for _ in range(target - below):
        pos = row.index(b",", pos) + 1
    return pos


class IncrementalPmCache:
    """Node-memory table of offsets learned during scans.

    Entries are per (table, ordinal, attribute): an offsets array plus a
    validity mask, so partially-learned attributes still help. Updates are
    best-effort; losing one costs future work, never correctness.
    """

    def __init__(self, cap_bytes: int = 256 << 20):
        self.cap_bytes = cap_bytes
        self._entries: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._bytes = 0
        self._lock = threading.Lock()

    def lookup(self, block_key: tuple, attr: int):
        with self._lock:
            return self._entries.get(block_key + (attr,))

    def learn(
        self, block_key: tuple, attr: int, rows: np.ndarray, offsets: np.ndarray,
        record_count: int,
    ) -> None:
        key = block_key + (attr,)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                offs = np.zeros(record_count, dtype=np.uint32)
                valid = np.zeros(record_count, dtype=bool)
                self._entries[key] = (offs, valid)
                self._bytes += offs.nbytes + valid.nbytes
                while self._bytes > self.cap_bytes and len(self._entries) > 1:
                    k = next(iter(self._entries))
                    if k == key:
                        k = next(i for i in self._entries if i != key)
                    o, v = self._entries.pop(k)
                    self._bytes -= o.nbytes + v.nbytes
            else:
                offs, valid = entry
            offs[rows] = offsets
            valid[rows] = True

    def drop_table(self, table: str) -> None:
        with self._lock:
            for k in [k for k in self._entries if k[0] == table]:
                o, v = self._entries.pop(k)
                self._bytes -= o.nbytes + v.nbytes


class _NEGATIVE:
    pass


class MetadataCache:
    """Node-wide decoded-metadata cache shared by every session.

    The first query against a block decodes its metadata once; concurrent
    requests wait rather than decode twice. A missing or undecodable file is
    cached as a negative entry — queries proceed without it.
    """

    def __init__(self, cap_bytes: int = 1 << 30):
        self.cap_bytes = cap_bytes
        self._entries: dict[tuple, object] = {}
        self._locks: dict[tuple, threading.Lock] = {}
        self._lock = threading.Lock()
        self._bytes = 0
        self.decode_count = 0

    def get_or_load(self, key: tuple, loader):
        with self._lock:
            if key in self._entries:
                v = self._entries[key]
                return None if v is _NEGATIVE else v
            keylock = self._locks.setdefault(key, threading.Lock())
        with keylock:
            with self._lock:
                if key in self._entries:
                    v = self._entries[key]
                    return None if v is _NEGATIVE else v
            value, size = loader()
            self.decode_count += 1
            with self._lock:
                self._entries[key] = _NEGATIVE if value is None else value
                self._bytes += size
                while self._bytes > self.cap_bytes and len(self._entries) > 1:
                    k = next(iter(self._entries))
                    if k == key:
                        k = next(i for i in self._entries if i != key)
                    self._entries.pop(k)
                    self._locks.pop(k, None)
            return value

    def drop_table(self, table: str) -> None:
        with self._lock:
            for k in [k for k in self._entries if k[0] == table]:
                self._entries.pop(k)
                self._locks.pop(k, None)


def full_scan(
    data: bytes,
    types: tuple[str, ...],
    req: ScanRequest,
    pm: PositionalMap | None = None,
    cache: IncrementalPmCache | None = None,
    counters: ScanCounters | None = None,
    kernel: str = "vector",
    cache_key: tuple | None = None,
) -> list[tuple]:
    """Scan every record of a block, emitting projected typed values for
    exactly the rows satisfying the predicate, in record order.

    Predicate attributes are located and parsed for every row; projection
    attributes only for qualifying rows. Rows that fail numeric parsing are
    excluded and tallied in ``parse_errors``.
    """
    counters = counters if counters is not None else ScanCounters()
    if cache_key is None:
        cache_key = (req.table, req.ordinal)
    if kernel == "scalar":
        return _full_scan_scalar(data, types, req, pm, cache, counters, cache_key)
    scan = _VectorScan(data, types, cache_key, pm, cache, counters)
    return scan.run(req)


def index_scan(
    data: bytes,
    types: tuple[str, ...],
    req: ScanRequest,
    vi: VerticalIndex,
    pm: PositionalMap | None = None,
    counters: ScanCounters | None = None,
    block_records: int | None = None,
) -> list[tuple]:
    """Evaluate the key predicate on the vertical index, then fetch only the
    matching rows by offset.

    Raises MetadataInconsistencyError when the index does not describe the
    block (entry count mismatch); callers fall back to a full scan.
    """
    counters = counters if counters is not None else ScanCounters()
    if block_records is None:
        block_records = data.count(b"\n")
    if vi.record_count != block_records:
        raise MetadataInconsistencyError(
            f"vertical index has {vi.record_count} entries for {block_records} records"
        )
    key_comps = [c for c in req.predicate if c.attr == vi.key_attr]
    if not key_comps:
        raise MetadataInconsistencyError("index access requested without a key predicate")
    residual = sorted(
        (c for c in req.predicate if c.attr != vi.key_attr), key=lambda c: c.attr
    )

    mask = np.ones(vi.record_count, dtype=bool)
    for comp in key_comps:
        mask &= _compare(vi.keys, comp.op, comp.value)
    matched = np.flatnonzero(mask)
    counters.rows_examined += len(matched)

    out: list[tuple] = []
    arity = len(types)
    for i in matched.tolist():
        start = int(vi.row_offsets[i])
        end = data.find(b"\n", start)
        row = data[start : end if end >= 0 else len(data)]
        anchors = pm.anchors(i) if pm is not None else None
        if pm is not None:
            counters.pm_hits += 1
        vals = {}
        ok = True
        for comp in residual:
            v = _extract_scalar(row, comp.attr, anchors, arity, types, counters)
            if v is None:
                counters.parse_errors += 1
                ok = False
                break
            vals[comp.attr] = v
            if not _compare_scalar(v, comp.op, comp.value):
                ok = False
                break
        if not ok:
            continue
        rowvals = []
        for a in req.projection:
            v = vals.get(a)
            if v is None:
                v = _extract_scalar(row, a, anchors, arity, types, counters)
            if v is None:
                counters.parse_errors += 1
                ok = False
                break
            rowvals.append(v)
        if not ok:
            continue
        counters.conversions += len(req.projection)
        out.append(tuple(rowvals))
        if req.limit is not None and len(out) >= req.limit:
            break
    counters.rows_emitted += len(out)
    return out


def _extract_scalar(row, attr, anchors, arity, types, counters):
    """Locate, slice and parse one attribute of one record."""
    try:
        start = locate_attr(row, attr, anchors, arity)
    except ValueError:
        return None
    origin = anchors.get(attr) if anchors else None
    if origin is None:
        amap = {0: 0}
        if anchors:
            amap.update(anchors)
        if attr in amap:
            span = 0
        else:
            below = max(a for a in amap if a < attr)
            above = min((a for a in amap if a > attr), default=None)
            if above is not None and (above - attr) < (attr - below):
                span = amap[above] - start
            else:
                span = start - amap[below]
        counters.bytes_located += span
    end = row.find(b",", start)
    field_bytes = row[start:] if end < 0 else row[start:end]
    t = types[attr]
    if t == TYPE_INT64:
        return kernels.parse_int_strict(field_bytes)
    if t == TYPE_FLOAT64:
        return kernels.parse_float_strict(field_bytes)
    return field_bytes.decode("utf-8", errors="replace")


def _compare(values: np.ndarray, op: str, literal) -> np.ndarray:
    if op == "<":
        return values < literal
    if op == "<=":
        return values <= literal
    if op == ">":
        return values > literal
    if op == ">=":
        return values >= literal
    if op == "=":
        return values == literal
    return values != literal


def _compare_scalar(value, op: str, literal) -> bool:
    if op == "<":
        return value < literal
    if op == "<=":
        return value <= literal
    if op == ">":
        return value > literal
    if op == ">=":
        return value >= literal
    if op == "=":
        return value == literal
    return value != literal


class _VectorScan:
    """One block's vectorized scan state: geometry, anchors, located offsets."""

    def __init__(self, data, types, cache_key, pm, cache, counters):
        self.data = data
        self.buf = kernels.as_buffer(data)
        self.types = types
        self.arity = len(types)
        self.cache_key = cache_key
        self.pm = pm
        self.cache = cache
        self.c = counters
        if pm is not None:
            self.row_starts = pm.row_starts()
            self.row_ends = self.row_starts + pm.row_lens.astype(np.int64)
        else:
            self.row_starts, self.row_ends = kernels.row_geometry(self.buf)
        self.nrows = len(self.row_starts)
        total = max(len(data) - self.nrows, 1)
        self.est_field = max(2, int(total / max(self.nrows * self.arity, 1)) + 1)
        self.anchor_attrs = sorted({0} | set(pm.sampled_attrs if pm else ()))
        self._commas: np.ndarray | None = None
        self._comma_base: np.ndarray | None = None
        # attr -> (absolute starts, valid); a row's attribute is located at
        # most once per scan, reuse is free
        self._located: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # ---- geometry helpers -------------------------------------------------

    def _token_index(self):
        if self._commas is None:
            self._commas = kernels.comma_positions(self.buf)
            self._comma_base = np.searchsorted(self._commas, self.row_starts)
        return self._commas, self._comma_base

    def _anchor_for(self, attr: int) -> tuple[int, int]:
        """(anchor_attr, signed_distance); positive distance walks forward."""
        below = max(a for a in self.anchor_attrs if a <= attr)
        above = min((a for a in self.anchor_attrs if a > attr), default=None)
        if above is not None and (above - attr) < (attr - below):
            return above, attr - above
        return below, attr - below

    def _anchor_starts(self, anchor: int) -> np.ndarray:
        if anchor == 0:
            return self.row_starts
        k = self.pm.sampled_attrs.index(anchor)
        return self.row_starts + self.pm.offsets[:, k].astype(np.int64)

    def locate_rows(self, attr: int, rows: np.ndarray) -> np.ndarray:
        """Absolute start of ``attr`` for the given row indices."""
        if attr in self.anchor_attrs:
            ent = self._located.get(attr)
            if ent is None:
                starts = self._anchor_starts(attr)
                ent = (starts, np.zeros(self.nrows, dtype=bool))
                self._located[attr] = ent
            fresh = ~ent[1][rows]
            self.c.pm_hits += int(fresh.sum())
            ent[1][rows] = True
            return ent[0][rows]

        ent = self._located.get(attr)
        if ent is None:
            ent = (np.zeros(self.nrows, dtype=np.int64), np.zeros(self.nrows, dtype=bool))
            self._located[attr] = ent
        starts_all, valid_all = ent
        out = np.empty(len(rows), dtype=np.int64)
        known = valid_all[rows]
        out[known] = starts_all[rows[known]]
        todo = np.flatnonzero(~known)
        if not len(todo):
            return out
        sub = rows[todo]

        resolved = np.zeros(len(sub), dtype=bool)
        vals = np.empty(len(sub), dtype=np.int64)
        if self.cache is not None:
            cached = self.cache.lookup(self.cache_key, attr)
            if cached is not None:
                offs, valid = cached
                hit = valid[sub]
                vals[hit] = self.row_starts[sub[hit]] + offs[sub[hit]]
                resolved[hit] = True
                self.c.pm_hits += int(hit.sum())
        miss = np.flatnonzero(~resolved)
        if len(miss):
            nav_rows = sub[miss]
            self.c.pm_misses += len(nav_rows)
            vals[miss] = self._navigate(attr, nav_rows)
            if self.cache is not None:
                rel = (vals[miss] - self.row_starts[nav_rows]).astype(np.uint32)
                self.cache.learn(self.cache_key, attr, nav_rows, rel, self.nrows)
        starts_all[sub] = vals
        valid_all[sub] = True
        out[todo] = vals
        return out

    def _navigate(self, attr: int, rows: np.ndarray) -> np.ndarray:
        anchor, dist = self._anchor_for(attr)
        origins = self._anchor_starts(anchor)[rows]
        # far targets with no useful anchor: use the block token index, but
        # charge the logical navigation span either way
        use_index = (
            abs(dist) * self.est_field * len(rows) > len(self.data) // 2
            and len(rows) * self.arity * 8 < (64 << 20)
        )
        if use_index:
            commas, base = self._token_index()
            if attr == 0:
                pos = self.row_starts[rows]
            else:
                pos = commas[base[rows] + attr - 1] + 1
        elif dist >= 0:
            pos, found = kernels.skip_seps_forward(
                self.buf, origins, dist, self.row_ends[rows], self.est_field
            )
            pos = self._resolve_misses(attr, rows, pos, found)
        else:
            pos, found = kernels.skip_seps_backward(
                self.buf, origins, -dist, self.row_starts[rows], self.est_field
            )
            pos = self._resolve_misses(attr, rows, pos, found)
        self.c.bytes_located += int(np.abs(pos - origins).sum())
        return pos

    def _resolve_misses(self, attr, rows, pos, found) -> np.ndarray:
        missing = np.flatnonzero(~found)
        if not len(missing):
            return pos
        pos = pos.copy()
        for i in missing.tolist():
            r = int(rows[i])
            row = self.data[self.row_starts[r] : self.row_ends[r]]
            try:
                pos[i] = self.row_starts[r] + locate_attr(row, attr, self._row_anchors(r))
            except ValueError:
                pos[i] = self.row_ends[r]  # malformed: parses as empty -> error path
        return pos

    def _row_anchors(self, record: int) -> dict[int, int]:
        return self.pm.anchors(record) if self.pm is not None else {}

    # ---- field extraction -------------------------------------------------

    def field_values(self, attr: int, rows: np.ndarray):
        """(values, ok) for ``attr`` over ``rows``; dtype depends on the type."""
        starts = self.locate_rows(attr, rows)
        t = self.types[attr]
        if t == TYPE_INT64:
            vals, good = kernels.parse_int64_at(self.buf, starts)
            bad = np.flatnonzero(~good)
            if len(bad):
                vals = vals.copy()
                ok = good.copy()
                for i in bad.tolist():
                    fb = self._slice_field(starts[i], self.row_ends[rows[i]])
                    v = kernels.parse_int_strict(fb)
                    if v is not None and -(2**63) <= v < 2**63:
                        vals[i] = v
                        ok[i] = True
                return vals, ok
            return vals, good
        ends = kernels.field_ends(self.buf, starts, self.row_ends[rows], self.est_field)
        if t == TYPE_FLOAT64:
            vals = np.empty(len(rows), dtype=np.float64)
            ok = np.ones(len(rows), dtype=bool)
            for i in range(len(rows)):
                v = kernels.parse_float_strict(self.data[starts[i] : ends[i]])
                if v is None:
                    ok[i] = False
                    vals[i] = 0.0
                else:
                    vals[i] = v
            return vals, ok
        vals = [
            self.data[starts[i] : ends[i]].decode("utf-8", errors="replace")
            for i in range(len(rows))
        ]
        return vals, np.ones(len(rows), dtype=bool)

    def _slice_field(self, start: int, row_end: int) -> bytes:
        end = self.data.find(b",", start, row_end)
        return self.data[start : row_end if end < 0 else end]

    # ---- driver -----------------------------------------------------------

    def run(self, req: ScanRequest) -> list[tuple]:
        self.c.rows_examined += self.nrows
        alive = np.arange(self.nrows)
        for comp in sorted(req.predicate, key=lambda c: c.attr):
            if not len(alive):
                break
            vals, ok = self.field_values(comp.attr, alive)
            nbad = int((~ok).sum())
            if nbad:
                self.c.parse_errors += nbad
            if isinstance(vals, list):  # text
                keep = np.array(
                    [o and _compare_scalar(v, comp.op, comp.value) for v, o in zip(vals, ok)],
                    dtype=bool,
                )
            else:
                keep = ok & _compare(vals, comp.op, comp.value)
            alive = alive[keep]
        if req.limit is not None:
            alive = alive[: req.limit]
        if not len(alive):
            return []

        columns = []
        for a in req.projection:
            vals, ok = self.field_values(a, alive)
            bad = int((~ok).sum())
            if bad:
                # a row with a malformed projected value is dropped before any
                # further attribute of it is located (matches the row kernel)
                self.c.parse_errors += bad
                keep = np.flatnonzero(ok)
                alive = alive[keep]
                vals = (
                    [v for i, v in enumerate(vals) if ok[i]]
                    if isinstance(vals, list)
                    else vals[keep]
                )
                columns = [
                    [v for i, v in enumerate(col) if ok[i]] if isinstance(col, list)
                    else col[keep]
                    for col in columns
                ]
            columns.append(vals)
        pycols = [c if isinstance(c, list) else c.tolist() for c in columns]
        out = list(zip(*pycols)) if pycols else [() for _ in range(len(alive))]
        self.c.conversions += len(alive) * len(req.projection)
        self.c.rows_emitted += len(out)
        return out


def _full_scan_scalar(data, types, req, pm, cache, counters, cache_key=None) -> list[tuple]:
    """Reference row-at-a-time kernel with identical semantics and counters."""
    buf = kernels.as_buffer(data)
    if pm is not None:
        row_starts = pm.row_starts()
        row_ends = row_starts + pm.row_lens.astype(np.int64)
    else:
        row_starts, row_ends = kernels.row_geometry(buf)
    nrows = len(row_starts)
    if cache_key is None:
        cache_key = (req.table, req.ordinal)
    counters.rows_examined += nrows
    arity = len(types)
    preds = sorted(req.predicate, key=lambda c: c.attr)
    out: list[tuple] = []
    learned: dict[int, list] = {}
    qualified = 0
    for r in range(nrows):
        row = data[row_starts[r] : row_ends[r]]
        anchors = dict(pm.anchors(r)) if pm is not None else {}
        cached_attrs = {}
        if cache is not None:
            for a in set([c.attr for c in preds] + list(req.projection)):
                e = cache.lookup(cache_key, a)
                if e is not None and e[1][r]:
                    cached_attrs[a] = int(e[0][r])
        memo: dict[int, int] = {}
        ok = True
        for comp in preds:
            v = _scalar_value(
                row, comp.attr, anchors, cached_attrs, arity, types, counters, learned, r, memo
            )
            if v is None:
                counters.parse_errors += 1
                ok = False
                break
            if not _compare_scalar(v, comp.op, comp.value):
                ok = False
                break
        if not ok:
            continue
        qualified += 1
        vals = []
        for a in req.projection:
            v = _scalar_value(
                row, a, anchors, cached_attrs, arity, types, counters, learned, r, memo
            )
            if v is None:
                counters.parse_errors += 1
                ok = False
                break
            vals.append(v)
        if ok:
            counters.conversions += len(req.projection)
            out.append(tuple(vals))
        if req.limit is not None and qualified >= req.limit:
            break
    if cache is not None:
        for a, pairs in learned.items():
            rows = np.array([p[0] for p in pairs], dtype=np.int64)
            offs = np.array([p[1] for p in pairs], dtype=np.uint32)
            cache.learn(cache_key, a, rows, offs, nrows)
    counters.rows_emitted += len(out)
    return out


def _scalar_value(row, attr, anchors, cached, arity, types, counters, learned, r, memo):
    if attr in memo:
        start = memo[attr]
    elif attr == 0 or attr in anchors:
        counters.pm_hits += 1
        start = anchors.get(attr, 0)
        memo[attr] = start
    elif attr in cached:
        counters.pm_hits += 1
        start = cached[attr]
        memo[attr] = start
    else:
        counters.pm_misses += 1
        try:
            start = locate_attr(row, attr, anchors, arity)
        except ValueError:
            return None
        amap = {0: 0, **anchors}
        below = max(a for a in amap if a < attr)
        above = min((a for a in amap if a > attr), default=None)
        if above is not None and (above - attr) < (attr - below):
            counters.bytes_located += amap[above] - start
        else:
            counters.bytes_located += start - amap[below]
        learned.setdefault(attr, []).append((r, start))
        memo[attr] = start
    end = row.find(b",", start)
    field_bytes = row[start:] if end < 0 else row[start:end]
    t = types[attr]
    if t == TYPE_INT64:
        return kernels.parse_int_strict(field_bytes)
    if t == TYPE_FLOAT64:
        return kernels.parse_float_strict(field_bytes)
    return field_bytes.decode("utf-8", errors="replace")
