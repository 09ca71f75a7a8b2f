import numpy as np
import pytest

from rawdb.blocks import NodeStore, ReplicationPolicy, StorageCluster
from rawdb.catalog import Catalog, Schema
from rawdb.engine import LocalEngine


def tokenize_oracle(block: bytes):
    """Brute-force reference tokenizer: per record, every attribute's first
    byte offset (row-relative) and the row length without its terminator."""
    rows = []
    for line in block.split(b"\n")[:-1]:
        fields = line.split(b",")
        offsets = []
        pos = 0
        for f in fields:
            offsets.append(pos)
            pos += len(f) + 1
        rows.append((fields, offsets, len(line)))
    return rows


def parse_table_oracle(block: bytes, types):
    """Full independent parse of a block into typed rows."""
    out = []
    for line in block.split(b"\n")[:-1]:
        fields = line.split(b",")
        row = []
        for f, t in zip(fields, types):
            if t == "int64":
                row.append(int(f))
            elif t == "float64":
                row.append(float(f))
            else:
                row.append(f.decode())
        out.append(tuple(row))
    return out


@pytest.fixture
def storage(tmp_path):
    nodes = [NodeStore(f"node{i}", tmp_path / f"node{i}") for i in range(4)]
    policy = ReplicationPolicy(3, tuple(s.node_id for s in nodes))
    return StorageCluster(nodes, policy)


@pytest.fixture
def catalog(tmp_path):
    return Catalog(tmp_path / "_catalog")


@pytest.fixture
def engine(tmp_path):
    eng = LocalEngine(tmp_path / "engine-root", block_size=1 << 16)
    yield eng
    eng.close()


def make_rows(rng: np.random.Generator, nrows: int, arity: int, max_value: int = 10**9):
    return rng.integers(0, max_value, size=(nrows, arity), dtype=np.int64)


def rows_to_csv_bytes(m) -> bytes:
    return b"".join(
        b",".join(str(v).encode() for v in row) + b"\n" for row in m
    )
