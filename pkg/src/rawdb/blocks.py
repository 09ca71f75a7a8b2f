"""Immutable, record-aligned block store with ring replication and tiers.

A table's bytes are split into blocks that always end on a record terminator,
so any block can be scanned in isolation. Every block primary at node ``i`` is
replicated onto the same fixed follower set, which keeps a data block and its
metadata blocks on identical node sets. The first replica of a block is the
memory-tier copy (an in-process byte cache); the rest live on disk only.
"""

from __future__ import annotations

import hashlib
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Iterator

from .errors import (
    CorruptBlockError,
    IngestError,
    NotHereError,
    RecordTooLargeError,
    StorageError,
)

KIND_DATA = "data"
KIND_PM = "pm"
KIND_VI = "vi"
KIND_STATS = "stats"
KINDS = (KIND_DATA, KIND_PM, KIND_VI, KIND_STATS)

TIER_MEMORY = "memory"
TIER_DISK = "disk"

TERMINATOR = b"\n"

DEFAULT_BLOCK_SIZE = 8 * 1024 * 1024


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass(frozen=True, order=True)
class BlockId:
    table: str
    kind: str
    ordinal: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.ordinal < 0:
            raise ValueError("ordinal must be non-negative")

    @property
    def filename(self) -> str:
        return f"{self.kind}.{self.ordinal}.blk"


@dataclass(frozen=True)
class Replica:
    node: str
    tier: str


@dataclass(frozen=True)
class BlockMeta:
    id: BlockId
    length: int
    record_count: int
    checksum: int
    replicas: tuple[Replica, ...] = ()
    under_replicated: bool = False

    def replica_nodes(self) -> tuple[str, ...]:
        return tuple(r.node for r in self.replicas)

    def to_json(self) -> dict:
        return {
            "table": self.id.table,
            "kind": self.id.kind,
            "ordinal": self.id.ordinal,
            "length": self.length,
            "record_count": self.record_count,
            "checksum": f"{self.checksum:016x}",
            "replicas": [{"node": r.node, "tier": r.tier} for r in self.replicas],
            "under_replicated": self.under_replicated,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BlockMeta":
        return cls(
            id=BlockId(d["table"], d["kind"], d["ordinal"]),
            length=d["length"],
            record_count=d["record_count"],
            checksum=int(d["checksum"], 16),
            replicas=tuple(Replica(r["node"], r["tier"]) for r in d["replicas"]),
            under_replicated=d.get("under_replicated", False),
        )


@dataclass(frozen=True)
class ReplicationPolicy:
    """Per-node n-way replication over a fixed membership ring."""

    n: int
    nodes: tuple[str, ...]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("replication factor must be >= 1")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node ids in ring")

    def followers(self, primary: str) -> tuple[str, ...]:
        i = self.nodes.index(primary)
        ring = [self.nodes[(i + k) % len(self.nodes)] for k in range(1, len(self.nodes))]
        return tuple(ring[: self.n - 1])


def place_replicas(block: BlockMeta, policy: ReplicationPolicy, primary_node: str) -> BlockMeta:
    """Fill a block's replica list: primary first (memory tier), then the ring.

    Metadata blocks placed with their data block's primary land on the same
    node list in the same order, which is what keeps scans local. With fewer
    live nodes than the factor the block is placed wide as possible and
    flagged under-replicated.
    """
    nodes = (primary_node,) + policy.followers(primary_node)
    tiers = (TIER_MEMORY,) + (TIER_DISK,) * (len(nodes) - 1)
    return replace(
        block,
        replicas=tuple(Replica(n, t) for n, t in zip(nodes, tiers)),
        under_replicated=len(nodes) < policy.n,
    )


class NodeStore:
    """One node's block files plus its memory-tier byte cache."""

    def __init__(self, node_id: str, root: Path | str, memory_cap: int = 4 << 30):
        self.node_id = node_id
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.memory_cap = memory_cap
        self._mem: OrderedDict[BlockId, bytes] = OrderedDict()
        self._mem_bytes = 0
        self._lock = threading.Lock()

    def path(self, bid: BlockId) -> Path:
        return self.root / bid.table / bid.filename

    def has(self, bid: BlockId) -> bool:
        with self._lock:
            if bid in self._mem:
                return True
        return self.path(bid).exists()

    def write(self, bid: BlockId, data: bytes, tier: str) -> None:
        p = self.path(bid)
        if p.exists():
            raise StorageError(f"block {bid} already exists on {self.node_id}")
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        try:
            with open(tmp, "wb") as f:
                f.write(data)
            os.replace(tmp, p)
        except OSError as e:
            tmp.unlink(missing_ok=True)
            raise StorageError(f"write failed on {self.node_id}: {e}") from e
        if tier == TIER_MEMORY:
            self._cache(bid, data)

    def read(self, bid: BlockId, byte_range: tuple[int, int] | None = None,
             cache: bool = False) -> bytes:
        with self._lock:
            data = self._mem.get(bid)
            if data is not None:
                self._mem.move_to_end(bid)
        if data is None:
            p = self.path(bid)
            if not p.exists():
                raise NotHereError(f"{self.node_id} holds no replica of {bid}")
            data = p.read_bytes()
            if cache:
                self._cache(bid, data)
        if byte_range is not None:
            lo, hi = byte_range
            if not (0 <= lo <= hi <= len(data)):
                raise StorageError(f"range {byte_range} outside block of {len(data)} bytes")
            return data[lo:hi]
        return data

    def read_checked(
        self,
        bid: BlockId,
        checksum: int,
        byte_range: tuple[int, int] | None = None,
        cache: bool = False,
    ) -> bytes:
        """Read with integrity: disk bytes are verified against the checksum;
        the memory cache is trusted since it only holds verified bytes."""
        with self._lock:
            data = self._mem.get(bid)
            if data is not None:
                self._mem.move_to_end(bid)
        if data is None:
            p = self.path(bid)
            if not p.exists():
                raise NotHereError(f"{self.node_id} holds no replica of {bid}")
            data = p.read_bytes()
            if checksum64(data) != checksum:
                raise CorruptBlockError(
                    f"checksum mismatch reading {bid} on {self.node_id}"
                )
            if cache:
                self._cache(bid, data)
        if byte_range is not None:
            lo, hi = byte_range
            if not (0 <= lo <= hi <= len(data)):
                raise StorageError(f"range {byte_range} outside block of {len(data)} bytes")
            return data[lo:hi]
        return data

    def _cache(self, bid: BlockId, data: bytes) -> None:
        with self._lock:
            if bid in self._mem:
                return
            self._mem[bid] = data
            self._mem_bytes += len(data)
            while self._mem_bytes > self.memory_cap and len(self._mem) > 1:
                _, old = self._mem.popitem(last=False)
                self._mem_bytes -= len(old)

    def drop_block(self, bid: BlockId) -> None:
        with self._lock:
            data = self._mem.pop(bid, None)
            if data is not None:
                self._mem_bytes -= len(data)
        self.path(bid).unlink(missing_ok=True)

    def delete_table(self, table: str) -> None:
        with self._lock:
            for bid in [b for b in self._mem if b.table == table]:
                self._mem_bytes -= len(self._mem.pop(bid))
        d = self.root / table
        if d.exists():
            for f in d.iterdir():
                f.unlink()
            d.rmdir()


def iter_record_chunks(stream: BinaryIO, target: int) -> Iterator[bytes]:
    """Record-aligned chunks of at most ``target`` bytes from a record stream.

    Rejects carriage-return terminators, records longer than the target, and
    streams whose final record is unterminated.
    """
    if target < 2:
        raise ValueError("target block size too small")
    buf = b""
    eof = False
    while not eof:
        while len(buf) < target and not eof:
            chunk = stream.read(max(target - len(buf), 1 << 16))
            if not chunk:
                eof = True
            else:
                buf += chunk
        if not buf:
            return
        if buf.find(b"\r\n") != -1:
            raise IngestError(r"carriage-return record terminators are not accepted")
        cut = buf.rfind(TERMINATOR, 0, target) + 1
        if cut == 0:
            if eof and len(buf) < target:
                raise IngestError("stream does not end with a record terminator")
            raise RecordTooLargeError(
                f"record exceeds target block size of {target} bytes"
            )
        yield buf[:cut]
        buf = buf[cut:]
    if buf:
        raise IngestError("stream does not end with a record terminator")


class StorageCluster:
    """Placement and IO across a set of node stores."""

    def __init__(self, nodes: Iterable[NodeStore], policy: ReplicationPolicy):
        self.nodes: dict[str, NodeStore] = {n.node_id: n for n in nodes}
        self.policy = policy
        if not set(policy.nodes) <= set(self.nodes):
            raise ValueError("policy names nodes not present in the cluster")

    def node(self, node_id: str) -> NodeStore:
        return self.nodes[node_id]

    def default_primary(self, ordinal: int) -> str:
        return self.policy.nodes[ordinal % len(self.policy.nodes)]

    def put_block(
        self,
        table: str,
        kind: str,
        ordinal: int,
        data: bytes,
        primary: str,
        record_count: int | None = None,
    ) -> BlockMeta:
        if kind == KIND_DATA:
            if data and not data.endswith(TERMINATOR):
                raise IngestError("data blocks must end on a record terminator")
            if record_count is None:
                record_count = data.count(TERMINATOR)
        meta = BlockMeta(
            id=BlockId(table, kind, ordinal),
            length=len(data),
            record_count=record_count or 0,
            checksum=checksum64(data),
        )
        meta = place_replicas(meta, self.policy, primary)
        for rep in meta.replicas:
            self.nodes[rep.node].write(meta.id, data, rep.tier)
        return meta

    def read_block(
        self, meta: BlockMeta, node_id: str, byte_range: tuple[int, int] | None = None
    ) -> bytes:
        rep = next((r for r in meta.replicas if r.node == node_id), None)
        if rep is None:
            raise NotHereError(f"{node_id} is not a replica of {meta.id}")
        return self.nodes[node_id].read_checked(
            meta.id, meta.checksum, byte_range, cache=rep.tier == TIER_MEMORY
        )

    def split_and_store(
        self,
        table: str,
        kind: str,
        byte_stream: BinaryIO,
        target_block_size: int = DEFAULT_BLOCK_SIZE,
        primary_of: Callable[[int], str] | None = None,
        start_ordinal: int = 0,
    ) -> list[BlockMeta]:
        """Split a record stream into aligned blocks and store them replicated.

        Non-data kinds are stored as a single unsplit block. Any failure rolls
        back every block written by this call.
        """
        primary_of = primary_of or self.default_primary
        metas: list[BlockMeta] = []
        try:
            if kind == KIND_DATA:
                chunks: Iterable[bytes] = iter_record_chunks(byte_stream, target_block_size)
            else:
                payload = byte_stream.read()
                chunks = [payload] if payload else []
            for i, chunk in enumerate(chunks):
                ordinal = start_ordinal + i
                metas.append(
                    self.put_block(table, kind, ordinal, chunk, primary_of(ordinal))
                )
        except Exception:
            for m in metas:
                for rep in m.replicas:
                    self.nodes[rep.node].drop_block(m.id)
            raise
        return metas

    def delete_table(self, table: str) -> None:
        for store in self.nodes.values():
            store.delete_table(table)
