import io

import pytest

from rawdb.blocks import (
    BlockId,
    BlockMeta,
    NodeStore,
    ReplicationPolicy,
    StorageCluster,
    checksum64,
    iter_record_chunks,
    place_replicas,
)
from rawdb.errors import (
    CorruptBlockError,
    IngestError,
    NotHereError,
    RecordTooLargeError,
    StorageError,
)

from conftest import rows_to_csv_bytes, make_rows
import numpy as np


def test_split_three_records_target_20(storage):
    data = b"".join(b"123456789\n" for _ in range(3))  # 3 records of 10 bytes
    metas = storage.split_and_store("t", "data", io.BytesIO(data), 20)
    assert [m.length for m in metas] == [20, 10]
    assert [m.record_count for m in metas] == [2, 1]


def test_split_empty_stream(storage):
    metas = storage.split_and_store("t", "data", io.BytesIO(b""), 1024)
    assert metas == []


def test_split_reassembly_matches_input(storage):
    rng = np.random.default_rng(11)
    data = rows_to_csv_bytes(make_rows(rng, 1000, 5))
    metas = storage.split_and_store("t", "data", io.BytesIO(data), 4096)
    assert all(m.length <= 4096 for m in metas)
    got = b"".join(
        storage.read_block(m, m.replicas[0].node) for m in sorted(metas, key=lambda m: m.id)
    )
    assert got == data
    assert all(
        storage.read_block(m, m.replicas[0].node)[-1:] == b"\n" for m in metas
    )


def test_split_rejects_oversized_record(storage):
    data = b"x" * 100 + b"\n"
    with pytest.raises(RecordTooLargeError):
        storage.split_and_store("t", "data", io.BytesIO(data), 50)
    # nothing left behind
    assert all(not (s.root / "t").exists() for s in storage.nodes.values())


def test_split_rejects_crlf(storage):
    with pytest.raises(IngestError):
        storage.split_and_store("t", "data", io.BytesIO(b"a,b\r\nc,d\n"), 64)


def test_split_rejects_unterminated_tail(storage):
    with pytest.raises(IngestError):
        storage.split_and_store("t", "data", io.BytesIO(b"a,b\nc,d"), 64)


def test_ring_placement():
    policy = ReplicationPolicy(3, ("node0", "node1", "node2", "node3"))
    meta = BlockMeta(BlockId("t", "data", 0), 10, 1, 0)
    placed = place_replicas(meta, policy, "node0")
    assert placed.replica_nodes() == ("node0", "node1", "node2")
    assert [r.tier for r in placed.replicas] == ["memory", "disk", "disk"]
    assert not placed.under_replicated
    placed2 = place_replicas(meta, policy, "node3")
    assert placed2.replica_nodes() == ("node3", "node0", "node1")


def test_metadata_blocks_colocate_with_data(storage):
    data_meta = storage.put_block("t", "data", 7, b"5,6\n", "node2")
    pm_meta = storage.put_block("t", "pm", 7, b"fakepm", "node2")
    assert pm_meta.replicas == data_meta.replicas


def test_replication_factor_one():
    policy = ReplicationPolicy(1, ("node0", "node1"))
    meta = place_replicas(BlockMeta(BlockId("t", "data", 0), 1, 1, 0), policy, "node1")
    assert meta.replica_nodes() == ("node1",)


def test_under_replication_flagged():
    policy = ReplicationPolicy(3, ("node0", "node1"))
    meta = place_replicas(BlockMeta(BlockId("t", "data", 0), 1, 1, 0), policy, "node0")
    assert meta.replica_nodes() == ("node0", "node1")
    assert meta.under_replicated


def test_read_block_full_and_range(storage):
    meta = storage.put_block("t", "data", 0, b"0123456789012345678\n", "node0")
    assert len(storage.read_block(meta, "node0")) == 20
    assert storage.read_block(meta, "node1", byte_range=(5, 9)) == b"5678"


def test_read_from_non_replica_is_not_here(storage):
    meta = storage.put_block("t", "data", 0, b"a\n", "node0")  # replicas node0..2
    with pytest.raises(NotHereError):
        storage.read_block(meta, "node3")


def test_checksum_mismatch_detected(storage, tmp_path):
    meta = storage.put_block("t", "data", 0, b"abc\n", "node0")
    p = storage.node("node1").path(meta.id)
    p.write_bytes(b"abX\n")
    with pytest.raises(CorruptBlockError):
        storage.read_block(meta, "node1")


def test_blocks_are_immutable(storage):
    storage.put_block("t", "data", 0, b"a\n", "node0")
    with pytest.raises(StorageError):
        storage.put_block("t", "data", 0, b"b\n", "node0")


def test_delete_table_removes_data_and_metadata(storage):
    storage.put_block("t", "data", 0, b"a\n", "node0")
    storage.put_block("t", "pm", 0, b"pm", "node0")
    storage.delete_table("t")
    for s in storage.nodes.values():
        assert not (s.root / "t").exists()


def test_memory_tier_cache_serves_after_file_removed(tmp_path):
    store = NodeStore("n", tmp_path / "n")
    bid = BlockId("t", "data", 0)
    store.write(bid, b"hello\n", "memory")
    store.path(bid).unlink()
    assert store.read(bid) == b"hello\n"


def test_memory_cap_evicts_oldest(tmp_path):
    store = NodeStore("n", tmp_path / "n", memory_cap=10)
    a, b = BlockId("t", "data", 0), BlockId("t", "data", 1)
    store.write(a, b"aaaaaaa\n", "memory")
    store.write(b, b"bbbbbbb\n", "memory")
    with store._lock:
        assert a not in store._mem and b in store._mem
    # still readable from disk
    assert store.read(a) == b"aaaaaaa\n"


def test_checksum64_is_stable():
    assert checksum64(b"") == checksum64(b"")
    assert checksum64(b"abc") != checksum64(b"abd")
