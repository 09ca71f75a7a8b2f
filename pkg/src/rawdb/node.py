"""Per-node fragment runtime: local block IO, shared metadata cache, scans.

A runtime is stateless with respect to the catalog — every fragment carries
the block descriptors it needs, so a node can execute work for any table
whose blocks it holds. Decoded positional maps and vertical indexes live in a
node-wide cache shared by all sessions; a missing or corrupt metadata file
downgrades the scan instead of failing it.
"""

from __future__ import annotations

import logging
import time

from .blocks import KIND_PM, KIND_VI, TIER_MEMORY, BlockMeta, NodeStore, checksum64
from .errors import (
    MetadataDecodeError,
    MetadataInconsistencyError,
    NotHereError,
)
from .metadata import pm_decode, vi_decode
from .scan import (
    ACCESS_INDEX,
    IncrementalPmCache,
    MetadataCache,
    ScanCounters,
    ScanRequest,
    full_scan,
    index_scan,
)
from .sql.executor import build_map_from_rows, build_partial, join_rows

log = logging.getLogger(__name__)


class NodeRuntime:
    def __init__(self, store: NodeStore, kernel: str = "vector"):
        self.store = store
        self.kernel = kernel
        self.metadata_cache = MetadataCache()
        self.pm_cache = IncrementalPmCache()

    def drop_table(self, table: str) -> None:
        self.metadata_cache.drop_table(table)
        self.pm_cache.drop_table(table)

    # ---- metadata loading ---------------------------------------------------

    def load_block_metadata(self, kind: str, meta: BlockMeta | None, data_meta: BlockMeta):
        """Fetch a decoded PM or VI through the shared cache.

        Returns None (a cached negative) when the file is absent, corrupt or
        inconsistent with its data block; scans then run without it.
        """
        if meta is None:
            return None
        key = (meta.id.table, kind, meta.id.ordinal, meta.checksum)

        def loader():
            try:
                raw = self.store.read(meta.id)
            except NotHereError:
                return None, 64
            if checksum64(raw) != meta.checksum:
                log.warning("checksum mismatch on %s; scanning without it", meta.id)
                return None, 64
            try:
                if kind == KIND_PM:
                    obj = pm_decode(raw)
                    ok = obj.record_count == data_meta.record_count and (
                        obj.record_count == 0
                        or int(obj.row_starts()[-1]) + int(obj.row_lens[-1]) + 1
                        == data_meta.length
                    )
                else:
                    obj = vi_decode(raw)
                    ok = True
                if not ok:
                    log.warning("%s does not describe its data block; ignoring it", meta.id)
                    return None, 64
                return obj, len(raw)
            except MetadataDecodeError as e:
                log.warning("failed to decode %s: %s; scanning without it", meta.id, e)
                return None, 64

        return self.metadata_cache.get_or_load(key, loader)

    # ---- fragment execution ---------------------------------------------------

    def execute_fragment(self, frag: dict) -> dict:
        """Run one scan fragment and reduce it to a partial result."""
        t0 = time.perf_counter()
        meta = BlockMeta.from_json(frag["block"])
        rep = next((r for r in meta.replicas if r.node == self.store.node_id), None)
        if rep is None:
            raise NotHereError(f"{self.store.node_id} holds no replica of {meta.id}")
        data = self.store.read_checked(
            meta.id, meta.checksum, cache=rep.tier == TIER_MEMORY
        )

        types = tuple(frag["types"])
        req = ScanRequest.from_json(frag["request"])
        counters = ScanCounters()
        cache_key = (req.table, req.ordinal, meta.checksum)

        pm_meta = BlockMeta.from_json(frag["pm_block"]) if frag.get("pm_block") else None
        vi_meta = BlockMeta.from_json(frag["vi_block"]) if frag.get("vi_block") else None
        pm = self.load_block_metadata(KIND_PM, pm_meta, meta)

        access_used = req.access
        rows = None
        if req.access == ACCESS_INDEX:
            vi = self.load_block_metadata(KIND_VI, vi_meta, meta)
            if vi is None:
                access_used = "full"
            else:
                try:
                    rows = index_scan(
                        data, types, req, vi, pm, counters, block_records=meta.record_count
                    )
                except MetadataInconsistencyError as e:
                    log.warning("index scan of %s fell back to full scan: %s", meta.id, e)
                    access_used = "full"
        if rows is None:
            full_req = req if req.access != ACCESS_INDEX else ScanRequest(
                table=req.table, ordinal=req.ordinal, projection=req.projection,
                predicate=req.predicate, access="full", limit=req.limit,
            )
            rows = full_scan(
                data, types, full_req, pm, self.pm_cache, counters,
                kernel=frag.get("kernel", self.kernel), cache_key=cache_key,
            )

        build = frag.get("build")
        if build is not None:
            bmap = build_map_from_rows([tuple(r) for r in build["rows"]], build["key_col"])
            rows = join_rows(rows, frag["probe_key_col"], bmap, build["width"])

        partial = build_partial(frag["partial"], req.ordinal, rows)
        return {
            "fragment_id": frag["fragment_id"],
            "node": self.store.node_id,
            "partial": partial,
            "counters": counters.to_json(),
            "access_used": access_used,
            "elapsed_ms": (time.perf_counter() - t0) * 1000.0,
        }
