"""Table catalog: schemas, descriptors, manifests and location lookup."""

from __future__ import annotations

import base64
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import BlockMeta
from .errors import CatalogError
from .metadata import HllSketch, TableStatistics

TYPE_INT64 = "int64"
TYPE_FLOAT64 = "float64"
TYPE_TEXT = "text"
TYPES = (TYPE_INT64, TYPE_FLOAT64, TYPE_TEXT)


@dataclass(frozen=True)
class Attribute:
    name: str
    type: str

    def __post_init__(self):
        if self.type not in TYPES:
            raise CatalogError(f"unknown attribute type {self.type!r}")


@dataclass(frozen=True)
class Schema:
    attrs: tuple[Attribute, ...]

    @property
    def arity(self) -> int:
        return len(self.attrs)

    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attrs)

    def types(self) -> tuple[str, ...]:
        return tuple(a.type for a in self.attrs)

    def index(self, name: str) -> int:
        for i, a in enumerate(self.attrs):
            if a.name == name:
                return i
        raise CatalogError(f"unknown attribute {name!r}")

    @classmethod
    def uniform(cls, arity: int, type: str = TYPE_INT64, prefix: str = "a") -> "Schema":
        return cls(tuple(Attribute(f"{prefix}{i}", type) for i in range(arity)))

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Parse ``name:type,name:type,...``; bare names default to int64."""
        attrs = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                raise CatalogError("empty attribute in schema text")
            name, _, typ = part.partition(":")
            attrs.append(Attribute(name.strip(), typ.strip() or TYPE_INT64))
        return cls(tuple(attrs))

    def to_json(self) -> list:
        return [{"name": a.name, "type": a.type} for a in self.attrs]

    @classmethod
    def from_json(cls, items: list) -> "Schema":
        return cls(tuple(Attribute(d["name"], d["type"]) for d in items))


def stats_to_json(st: TableStatistics | None) -> dict | None:
    if st is None:
        return None
    return {
        "record_count": st.record_count,
        "attrs": [
            {
                "attr": a,
                "p": st.sketches[a].p,
                "registers": base64.b64encode(st.sketches[a].registers.tobytes()).decode(),
            }
            for a in st.tracked_attrs()
        ],
    }


def stats_from_json(d: dict | None) -> TableStatistics | None:
    if d is None:
        return None
    sketches = {
        e["attr"]: HllSketch(
            e["p"], np.frombuffer(base64.b64decode(e["registers"]), dtype=np.uint8)
        )
        for e in d["attrs"]
    }
    return TableStatistics(record_count=d["record_count"], sketches=sketches)


@dataclass
class TableDescriptor:
    name: str
    schema: Schema
    data_blocks: list[BlockMeta]
    pm_blocks: list[BlockMeta] = field(default_factory=list)
    vi_blocks: list[BlockMeta] = field(default_factory=list)
    stats_blocks: list[BlockMeta] = field(default_factory=list)
    key_attrs: tuple[int, ...] = ()
    stats: TableStatistics | None = None
    created_at: float = field(default_factory=time.time)

    @property
    def record_count(self) -> int:
        return sum(b.record_count for b in self.data_blocks)

    def metadata_lists(self) -> dict[str, list[BlockMeta]]:
        return {"pm": self.pm_blocks, "vi": self.vi_blocks, "stats": self.stats_blocks}

    def validate(self) -> None:
        n = len(self.data_blocks)
        for kind, lst in self.metadata_lists().items():
            if lst and len(lst) != n:
                raise CatalogError(
                    f"{kind} block list of {self.name} has {len(lst)} entries for {n} data blocks"
                )
        for v in colocation_violations(self):
            raise CatalogError(v)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "schema": self.schema.to_json(),
            "key_attrs": list(self.key_attrs),
            "created_at": self.created_at,
            "blocks": {
                "data": [b.to_json() for b in self.data_blocks],
                "pm": [b.to_json() for b in self.pm_blocks],
                "vi": [b.to_json() for b in self.vi_blocks],
                "stats": [b.to_json() for b in self.stats_blocks],
            },
            "table_stats": stats_to_json(self.stats),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TableDescriptor":
        blk = d["blocks"]
        return cls(
            name=d["name"],
            schema=Schema.from_json(d["schema"]),
            data_blocks=[BlockMeta.from_json(b) for b in blk["data"]],
            pm_blocks=[BlockMeta.from_json(b) for b in blk["pm"]],
            vi_blocks=[BlockMeta.from_json(b) for b in blk["vi"]],
            stats_blocks=[BlockMeta.from_json(b) for b in blk["stats"]],
            key_attrs=tuple(d["key_attrs"]),
            stats=stats_from_json(d.get("table_stats")),
            created_at=d.get("created_at", 0.0),
        )


def colocation_violations(desc: TableDescriptor) -> list[str]:
    """Metadata blocks must sit on exactly their data block's replica list."""
    out = []
    for kind, lst in desc.metadata_lists().items():
        for meta in lst:
            data = desc.data_blocks[meta.id.ordinal]
            if meta.replicas != data.replicas:
                out.append(
                    f"{desc.name} {kind}.{meta.id.ordinal} replicas {meta.replica_nodes()} "
                    f"differ from data replicas {data.replica_nodes()}"
                )
    return out


def lookup_locations(desc: TableDescriptor, dead_nodes: set[str] | None = None) -> list[dict]:
    """Per data ordinal: candidate nodes in preference order plus metadata ids.

    The memory-tier replica comes first. An ordinal whose replicas are all
    dead is flagged unavailable rather than dropped.
    """
    dead = dead_nodes or set()
    out = []
    for i, meta in enumerate(desc.data_blocks):
        nodes = list(meta.replica_nodes())
        out.append(
            {
                "ordinal": i,
                "nodes": nodes,
                "tiers": [r.tier for r in meta.replicas],
                "pm": desc.pm_blocks[i].id if desc.pm_blocks else None,
                "vi": desc.vi_blocks[i].id if desc.vi_blocks else None,
                "stats": desc.stats_blocks[i].id if desc.stats_blocks else None,
                "unavailable": all(n in dead for n in nodes),
            }
        )
    return out


class Catalog:
    """Registered tables; reads concurrent, registrations serialized.

    When constructed with a root directory the catalog persists one JSON
    manifest per table at ``<root>/<table>/manifest.json`` and reloads them on
    startup.
    """

    def __init__(self, root: Path | str | None = None):
        self.root = Path(root) if root is not None else None
        self._tables: dict[str, TableDescriptor] = {}
        self._lock = threading.Lock()
        if self.root is not None and self.root.exists():
            for mf in sorted(self.root.glob("*/manifest.json")):
                desc = TableDescriptor.from_json(json.loads(mf.read_text()))
                self._tables[desc.name] = desc

    def register(self, desc: TableDescriptor) -> None:
        desc.validate()
        with self._lock:
            if desc.name in self._tables:
                raise CatalogError(f"table {desc.name!r} already exists")
            if self.root is not None:
                d = self.root / desc.name
                d.mkdir(parents=True, exist_ok=True)
                tmp = d / "manifest.json.tmp"
                tmp.write_text(json.dumps(desc.to_json()))
                tmp.replace(d / "manifest.json")
            self._tables[desc.name] = desc

    def get(self, name: str) -> TableDescriptor:
        with self._lock:
            try:
                return self._tables[name]
            except KeyError:
                raise CatalogError(f"unknown table {name!r}") from None

    def tables(self) -> list[str]:
        with self._lock:
            return sorted(self._tables)

    def drop(self, name: str) -> TableDescriptor:
        with self._lock:
            try:
                desc = self._tables.pop(name)
            except KeyError:
                raise CatalogError(f"unknown table {name!r}") from None
            if self.root is not None:
                mf = self.root / name / "manifest.json"
                mf.unlink(missing_ok=True)
                if mf.parent.exists() and not any(mf.parent.iterdir()):
                    mf.parent.rmdir()
            return desc
