"""Per-block metadata artifacts and their binary file formats.

Three artifacts ride along with every data block: a positional map (sampled
attribute offsets plus row lengths), a vertical index (key value and row start
per record) and cardinality statistics (record count plus one distinct-count
sketch per tracked attribute). Statistics additionally merge up to table
scope. All file integers are little-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import MetadataDecodeError, RawDbError

PM_MAGIC = b"DNPM"
VI_MAGIC = b"DNVI"
STATS_MAGIC = b"DNST"
FORMAT_VERSION = 1

KEY_INT64 = "int64"
KEY_FLOAT64 = "float64"
_KEY_CODES = {KEY_INT64: 0, KEY_FLOAT64: 1}
_KEY_NAMES = {v: k for k, v in _KEY_CODES.items()}


def _need(data: bytes, offset: int, count: int, what: str) -> None:
    if len(data) < offset + count:
        raise MetadataDecodeError(f"truncated {what}", min(len(data), offset))


def _check_magic(data: bytes, magic: bytes, what: str) -> None:
    _need(data, 0, 6, what)
    if data[:4] != magic:
        raise MetadataDecodeError(f"bad magic for {what}", 0)
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise MetadataDecodeError(f"unsupported {what} version {version}", 4)


@dataclass(eq=False)
class PositionalMap:
    """Sampled attribute offsets and row lengths for one data block.

    ``offsets[i, k]`` is the first data byte of attribute ``sampled_attrs[k]``
    within record ``i``, relative to the record's first byte. ``row_lens``
    exclude the one-byte terminator, so consecutive row starts differ by
    ``row_len + 1``.
    """

    attr_count: int
    sampled_attrs: tuple[int, ...]
    offsets: np.ndarray  # (records, S) uint32
    row_lens: np.ndarray  # (records,) uint32

    def __post_init__(self):
        self.sampled_attrs = tuple(self.sampled_attrs)
        self.offsets = np.asarray(self.offsets, dtype=np.uint32).reshape(
            len(self.row_lens), len(self.sampled_attrs)
        )
        self.row_lens = np.asarray(self.row_lens, dtype=np.uint32)
        self._row_starts: np.ndarray | None = None
        if list(self.sampled_attrs) != sorted(set(self.sampled_attrs)):
            raise ValueError("sampled attribute indices must be ascending")
        if any(a < 0 or a >= self.attr_count for a in self.sampled_attrs):
            raise ValueError("sampled attribute outside schema")

    @property
    def record_count(self) -> int:
        return len(self.row_lens)

    def row_starts(self) -> np.ndarray:
        """Block-relative start of each record, derived from row lengths."""
        if self._row_starts is None:
            starts = np.zeros(len(self.row_lens), dtype=np.int64)
            if len(self.row_lens) > 1:
                np.cumsum(self.row_lens[:-1].astype(np.int64) + 1, out=starts[1:])
            self._row_starts = starts
        return self._row_starts

    def anchors(self, record: int) -> dict[int, int]:
        return {a: int(self.offsets[record, k]) for k, a in enumerate(self.sampled_attrs)}

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PositionalMap)
            and self.attr_count == other.attr_count
            and self.sampled_attrs == other.sampled_attrs
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.row_lens, other.row_lens)
        )


def pm_encoded_size(record_count: int, sampled_count: int) -> int:
    """Closed-form encoded size: header + records * 4 * (sampled + 1)."""
    header = 4 + 2 + 4 + 4 + 4 * sampled_count + 8
    return header + record_count * 4 * (sampled_count + 1)


def pm_encode(pm: PositionalMap) -> bytes:
    s = len(pm.sampled_attrs)
    head = PM_MAGIC + struct.pack(
        "<HII", FORMAT_VERSION, pm.attr_count, s
    ) + struct.pack(f"<{s}I", *pm.sampled_attrs) + struct.pack("<Q", pm.record_count)
    body = np.empty((pm.record_count, s + 1), dtype="<u4")
    body[:, :s] = pm.offsets
    body[:, s] = pm.row_lens
    return head + body.tobytes()


def pm_decode(data: bytes) -> PositionalMap:
    _check_magic(data, PM_MAGIC, "positional map")
    _need(data, 6, 8, "positional map header")
    attr_count, s = struct.unpack_from("<II", data, 6)
    _need(data, 14, 4 * s + 8, "positional map header")
    sampled = struct.unpack_from(f"<{s}I", data, 14)
    (records,) = struct.unpack_from("<Q", data, 14 + 4 * s)
    off = 22 + 4 * s
    body_len = records * (s + 1) * 4
    if len(data) != off + body_len:
        raise MetadataDecodeError(
            f"positional map body expected {body_len} bytes", min(len(data), off + body_len)
        )
    body = np.frombuffer(data, dtype="<u4", offset=off).reshape(records, s + 1)
    return PositionalMap(
        attr_count=attr_count,
        sampled_attrs=tuple(int(a) for a in sampled),
        offsets=body[:, :s],
        row_lens=body[:, s],
    )


@dataclass(eq=False)
class VerticalIndex:
    """(key value, row start) per record of one data block, in record order.

    Keys are neither unique nor sorted; row offsets point at the first byte of
    a record.
    """

    key_attr: int
    key_type: str
    keys: np.ndarray  # int64 or float64
    row_offsets: np.ndarray  # uint64

    def __post_init__(self):
        if self.key_type not in _KEY_CODES:
            raise ValueError(f"unsupported key type {self.key_type}")
        dtype = np.int64 if self.key_type == KEY_INT64 else np.float64
        self.keys = np.asarray(self.keys, dtype=dtype)
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.uint64)
        if len(self.keys) != len(self.row_offsets):
            raise ValueError("keys and row offsets differ in length")

    @property
    def record_count(self) -> int:
        return len(self.keys)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VerticalIndex)
            and self.key_attr == other.key_attr
            and self.key_type == other.key_type
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.row_offsets, other.row_offsets)
        )


def vi_encode(vi: VerticalIndex) -> bytes:
    head = VI_MAGIC + struct.pack(
        "<HIBQ", FORMAT_VERSION, vi.key_attr, _KEY_CODES[vi.key_type], vi.record_count
    )
    body = np.empty(
        vi.record_count, dtype=np.dtype([("key", "<i8" if vi.key_type == KEY_INT64 else "<f8"), ("off", "<u8")])
    )
    body["key"] = vi.keys
    body["off"] = vi.row_offsets
    return head + body.tobytes()


def vi_decode(data: bytes) -> VerticalIndex:
    _check_magic(data, VI_MAGIC, "vertical index")
    _need(data, 6, 13, "vertical index header")
    key_attr, code, records = struct.unpack_from("<IBQ", data, 6)
    if code not in _KEY_NAMES:
        raise MetadataDecodeError(f"unknown key type code {code}", 10)
    off = 19
    if len(data) != off + records * 16:
        raise MetadataDecodeError(
            f"vertical index body expected {records * 16} bytes",
            min(len(data), off + records * 16),
        )
    key_type = _KEY_NAMES[code]
    body = np.frombuffer(
        data,
        dtype=np.dtype([("key", "<i8" if key_type == KEY_INT64 else "<f8"), ("off", "<u8")]),
        offset=off,
    )
    return VerticalIndex(
        key_attr=key_attr,
        key_type=key_type,
        keys=body["key"].copy(),
        row_offsets=body["off"].copy(),
    )


class HllSketch:
    """Distinct-count sketch with register-wise max merge.

    Buckets take the low ``p`` hash bits; the register keeps the max
    leading-zero rank of the remaining bits. The estimator is
    ``alpha_m * m^2 / sum(2^-M_j)`` with the small-range linear-counting
    correction; 64-bit hashing makes a large-range correction unnecessary.
    """

    __slots__ = ("p", "registers")

    def __init__(self, p: int = 12, registers: np.ndarray | None = None):
        if not 4 <= p <= 16:
            raise ValueError("precision must be in 4..16")
        self.p = p
        m = 1 << p
        if registers is None:
            self.registers = np.zeros(m, dtype=np.uint8)
        else:
            self.registers = np.asarray(registers, dtype=np.uint8).copy()
            if len(self.registers) != m:
                raise ValueError("register array does not match precision")

    def insert(self, value: bytes) -> None:
        h = kernels.hash64(value)
        j = h & ((1 << self.p) - 1)
        w = h >> self.p
        rank = (64 - self.p) - w.bit_length() + 1
        if rank > self.registers[j]:
            self.registers[j] = rank

    def insert_hashes(self, hashes: np.ndarray) -> None:
        """Bulk insert of precomputed 64-bit hashes (uint64 array)."""
        if not len(hashes):
            return
        m_mask = np.uint64((1 << self.p) - 1)
        j = (hashes & m_mask).astype(np.int64)
        w = hashes >> np.uint64(self.p)
        hi = (w >> np.uint64(32)).astype(np.float64)
        lo = (w & np.uint64(0xFFFFFFFF)).astype(np.float64)
        bl = np.where(hi > 0, np.frexp(hi)[1] + 32, np.frexp(lo)[1]).astype(np.int64)
        rank = ((64 - self.p) - bl + 1).astype(np.uint8)
        np.maximum.at(self.registers, j, rank)

    def estimate(self) -> float:
        m = 1 << self.p
        s = float(np.ldexp(1.0, -self.registers.astype(np.int32)).sum())
        raw = _alpha(m) * m * m / s
        zeros = int((self.registers == 0).sum())
        if raw <= 2.5 * m and zeros > 0:
            return m * math.log(m / zeros)
        return raw

    def merge(self, other: "HllSketch") -> "HllSketch":
        if self.p != other.p:
            raise RawDbError(
                f"cannot merge sketches of precision {self.p} and {other.p}"
            )
        return HllSketch(self.p, np.maximum(self.registers, other.registers))

    def copy(self) -> "HllSketch":
        return HllSketch(self.p, self.registers)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, HllSketch)
            and self.p == other.p
            and np.array_equal(self.registers, other.registers)
        )


def _alpha(m: int) -> float:
    if m == 16:
        return 0.673
    if m == 32:
        return 0.697
    if m == 64:
        return 0.709
    return 0.7213 / (1 + 1.079 / m)


@dataclass(eq=False)
class TableStatistics:
    """Record count plus per-attribute distinct-count sketches; mergeable."""

    record_count: int
    sketches: dict[int, HllSketch]

    def tracked_attrs(self) -> tuple[int, ...]:
        return tuple(sorted(self.sketches))

    def distinct(self, attr: int) -> float:
        return self.sketches[attr].estimate()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TableStatistics)
            and self.record_count == other.record_count
            and self.sketches == other.sketches
        )


def stats_merge(parts: list[TableStatistics]) -> TableStatistics:
    if not parts:
        raise RawDbError("cannot merge an empty list of statistics")
    attrs = parts[0].tracked_attrs()
    for p in parts[1:]:
        if p.tracked_attrs() != attrs:
            raise RawDbError(
                f"statistics track different attributes: {attrs} vs {p.tracked_attrs()}"
            )
    merged = {a: parts[0].sketches[a].copy() for a in attrs}
    for p in parts[1:]:
        for a in attrs:
            merged[a] = merged[a].merge(p.sketches[a])
    return TableStatistics(
        record_count=sum(p.record_count for p in parts), sketches=merged
    )


def stats_encode(st: TableStatistics) -> bytes:
    out = [STATS_MAGIC, struct.pack("<HQI", FORMAT_VERSION, st.record_count, len(st.sketches))]
    for attr in st.tracked_attrs():
        sk = st.sketches[attr]
        out.append(struct.pack("<IB", attr, sk.p))
        out.append(sk.registers.tobytes())
    return b"".join(out)


def stats_decode(data: bytes) -> TableStatistics:
    _check_magic(data, STATS_MAGIC, "statistics")
    _need(data, 6, 12, "statistics header")
    record_count, attr_count = struct.unpack_from("<QI", data, 6)
    off = 18
    sketches: dict[int, HllSketch] = {}
    for _ in range(attr_count):
        _need(data, off, 5, "statistics attribute header")
        attr, p = struct.unpack_from("<IB", data, off)
        off += 5
        m = 1 << p
        _need(data, off, m, "statistics registers")
        sketches[attr] = HllSketch(p, np.frombuffer(data, dtype=np.uint8, count=m, offset=off))
        off += m
    if off != len(data):
        raise MetadataDecodeError("trailing bytes after statistics", off)
    return TableStatistics(record_count=record_count, sketches=sketches)
