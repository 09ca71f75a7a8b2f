import time

import numpy as np
import pytest
import requests

from rawdb.blocks import NodeStore, ReplicationPolicy, StorageCluster
from rawdb.catalog import Catalog, Schema, colocation_violations, lookup_locations
from rawdb.cluster.coordinator import Coordinator
from rawdb.cluster.worker import Worker
from rawdb.decorators import DecoratorConfig, PmSpec, StatsSpec, ViSpec, decorate_existing
from rawdb.engine import LocalEngine
from rawdb.errors import CatalogError

from conftest import make_rows, rows_to_csv_bytes

HEARTBEAT_S = 0.3


@pytest.fixture
def cluster(tmp_path):
    """Coordinator plus four workers over one shared root, small heartbeats."""
    coord = Coordinator(
        tmp_path / "_catalog",
        heartbeat_s=HEARTBEAT_S,
        hedge_floor_ms=150.0,
        fault_injection=True,
    ).start()
    workers = [
        Worker(
            f"node{i}",
            tmp_path / f"node{i}",
            coordinator_url=coord.url,
            heartbeat_s=HEARTBEAT_S,
            fault_injection=True,
        ).start()
        for i in range(4)
    ]
    yield tmp_path, coord, workers
    for w in workers:
        w.kill()
    coord.stop()


def load_cluster_table(tmp_path, coord, name="t", rows=400, attrs=6, block=1024, seed=3):
    rng = np.random.default_rng(seed)
    m = make_rows(rng, rows, attrs, max_value=10**6)
    src = tmp_path / f"{name}.csv"
    src.write_bytes(rows_to_csv_bytes(m))
    node_ids = tuple(f"node{i}" for i in range(4))
    storage = StorageCluster(
        [NodeStore(n, tmp_path / n) for n in node_ids], ReplicationPolicy(3, node_ids)
    )
    desc = decorate_existing(
        storage, coord.catalog, src, name, Schema.uniform(attrs),
        DecoratorConfig(
            pm=PmSpec(rate_k=2), vi=(ViSpec(0),), stats=StatsSpec(attrs=(0,)),
            target_block_size=block,
        ),
    )
    return m, desc


def oracle_rows(m, proj, pred_attr, c):
    return [
        tuple(int(r[a]) for a in proj) for r in m if int(r[pred_attr]) < c
    ]


class TestRegistryAndCatalog:
    def test_workers_register_and_heartbeat(self, cluster):
        tmp_path, coord, workers = cluster
        nodes = requests.get(f"{coord.url}/v1/nodes").json()["nodes"]
        assert [n["node_id"] for n in nodes] == [f"node{i}" for i in range(4)]
        assert all(n["state"] == "live" for n in nodes)

    def test_killed_worker_goes_suspect_then_dead(self, cluster):
        tmp_path, coord, workers = cluster
        t0 = time.time()
        workers[1].kill()
        # sit inside the suspect window (gap in (H, 3H]), then past it
        time.sleep(max(0.0, t0 + HEARTBEAT_S * 1.8 - time.time()))
        assert coord.node_state("node1") == "suspect"
        time.sleep(max(0.0, t0 + HEARTBEAT_S * 3.8 - time.time()))
        assert coord.node_state("node1") == "dead"
        assert coord.node_state("node0") == "live"

    def test_reregistration_revalidates(self, cluster):
        tmp_path, coord, workers = cluster
        load_cluster_table(tmp_path, coord)
        w0 = workers[0]
        w0.kill()
        w2 = Worker(
            "node0", tmp_path / "node0", coordinator_url=coord.url,
            heartbeat_s=HEARTBEAT_S, fault_injection=True,
        ).start()
        workers[0] = w2
        r = requests.post(
            f"{coord.url}/v1/register", json={"node_id": "node0", "address": w2.url}
        ).json()
        assert r["revalidated"] >= 1
        assert coord.node_state("node0") == "live"

    def test_duplicate_table_registration_conflict(self, cluster):
        tmp_path, coord, workers = cluster
        _, desc = load_cluster_table(tmp_path, coord)
        r = requests.post(f"{coord.url}/v1/tables", json=desc.to_json())
        assert r.status_code == 409

    def test_lookup_locations_shape(self, cluster):
        tmp_path, coord, workers = cluster
        _, desc = load_cluster_table(tmp_path, coord)
        locs = lookup_locations(desc)
        assert all(len(l["nodes"]) == 3 for l in locs)
        assert all(l["tiers"][0] == "memory" for l in locs)
        assert all(l["vi"] is not None for l in locs)
        assert colocation_violations(desc) == []
        body = requests.get(f"{coord.url}/v1/tables/t").json()
        assert len(body["locations"]) == len(desc.data_blocks)

    def test_locations_flag_unavailable_when_all_replicas_dead(self, cluster):
        tmp_path, coord, workers = cluster
        _, desc = load_cluster_table(tmp_path, coord)
        dead = set(desc.data_blocks[0].replica_nodes())
        locs = lookup_locations(desc, dead)
        assert locs[0]["unavailable"]

    def test_concurrent_registrations_are_atomic(self, cluster):
        import threading

        tmp_path, coord, workers = cluster
        descs = []
        for name in ("ta", "tb"):
            _, d = load_cluster_table(tmp_path, coord, name=name, seed=ord(name[1]))
            descs.append(d)
            coord.catalog.drop(name)
        errs = []

        def reg(d):
            try:
                coord.catalog.register(d)
            except CatalogError as e:
                errs.append(e)

        ts = [threading.Thread(target=reg, args=(d,)) for d in descs]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert not errs
        assert set(coord.catalog.tables()) >= {"ta", "tb"}


class TestQueryPath:
    def test_healthy_query_matches_oracle_zero_retries(self, cluster):
        tmp_path, coord, workers = cluster
        m, desc = load_cluster_table(tmp_path, coord)
        r = requests.post(
            f"{coord.url}/v1/query",
            json={"sql": "select a2 from t where a1 < 200000"},
        ).json()
        assert [tuple(x) for x in r["rows"]] == oracle_rows(m, (2,), 1, 200000)
        assert r["report"]["retries"] == 0
        assert len(r["report"]["fragments"]) == len(desc.data_blocks)

    def test_locality_fragments_run_on_replica_holders(self, cluster):
        tmp_path, coord, workers = cluster
        m, desc = load_cluster_table(tmp_path, coord)
        r = requests.post(
            f"{coord.url}/v1/query", json={"sql": "select count(*) from t"}
        ).json()
        holders = {
            f["ordinal"]: set(desc.data_blocks[f["ordinal"]].replica_nodes())
            for f in r["report"]["fragments"]
        }
        for f in r["report"]["fragments"]:
            assert f["node"] in holders[f["ordinal"]]

    def test_tier_preference_first_dispatch_targets_memory_replica(self, cluster):
        tmp_path, coord, workers = cluster
        m, desc = load_cluster_table(tmp_path, coord)
        r = requests.post(
            f"{coord.url}/v1/query", json={"sql": "select count(*) from t"}
        ).json()
        for f in r["report"]["fragments"]:
            memory_node = desc.data_blocks[f["ordinal"]].replicas[0].node
            assert f["node"] == memory_node and f["retries"] == 0

    def test_parse_error_surfaced_with_position(self, cluster):
        tmp_path, coord, workers = cluster
        r = requests.post(f"{coord.url}/v1/query", json={"sql": "selec x"})
        assert r.status_code == 400
        body = r.json()
        assert body["kind"] in ("ParseError", "UnsupportedSqlError")

    def test_kill_endpoint_gated_by_flag(self, tmp_path):
        coord = Coordinator(tmp_path / "_c", fault_injection=False).start()
        try:
            r = requests.post(f"{coord.url}/v1/nodes/node0/kill")
            assert r.status_code == 403
        finally:
            coord.stop()

    def test_worker_killed_mid_run_fragments_redirected(self, cluster):
        tmp_path, coord, workers = cluster
        m, desc = load_cluster_table(tmp_path, coord)
        expected = oracle_rows(m, (3,), 2, 300000)
        sql = "select a3 from t where a2 < 300000"
        before = requests.post(f"{coord.url}/v1/query", json={"sql": sql}).json()
        assert [tuple(x) for x in before["rows"]] == expected

        requests.post(f"{coord.url}/v1/nodes/node1/kill")
        time.sleep(0.2)
        total_retries = 0
        for _ in range(10):
            r = requests.post(f"{coord.url}/v1/query", json={"sql": sql}).json()
            assert [tuple(x) for x in r["rows"]] == expected
            total_retries += r["report"]["retries"]
        assert total_retries >= 1
        # no fragment ran on the dead node
        later = requests.post(f"{coord.url}/v1/query", json={"sql": sql}).json()
        time.sleep(HEARTBEAT_S * 3.5)
        final = requests.post(f"{coord.url}/v1/query", json={"sql": sql}).json()
        assert all(f["node"] != "node1" for f in final["report"]["fragments"])
        assert [tuple(x) for x in final["rows"]] == expected

    def test_slow_worker_hedged_first_answer_wins(self, cluster):
        tmp_path, coord, workers = cluster
        m, desc = load_cluster_table(tmp_path, coord)
        requests.post(f"{workers[0].url}/v1/slow", json={"ms": 1200})
        try:
            sql = "select count(*) from t"
            r = requests.post(
                f"{coord.url}/v1/query",
                json={"sql": sql, "options": {"timeout_ms": 20000}},
            ).json()
            assert r["rows"] == [[len(m)]]
            slow_frags = [f for f in r["report"]["fragments"] if f["retries"] > 0]
            assert slow_frags, "expected at least one hedged fragment"
            assert all(f["node"] != "node0" for f in slow_frags)
        finally:
            requests.post(f"{workers[0].url}/v1/slow", json={"ms": 0})

    def test_matches_local_engine_oracle(self, cluster, tmp_path):
        tp, coord, workers = cluster
        m, desc = load_cluster_table(tp, coord)
        local = LocalEngine(tmp_path / "oracle-root", block_size=1024)
        src = tp / "t.csv"
        local.ingest(src, "t", Schema.uniform(6), DecoratorConfig(target_block_size=1024))
        for sql in (
            "select a2, a4 from t where a1 < 300000",
            "select count(*), sum(a3), min(a2), max(a5) from t",
            "select a0, a1 from t order by a1 desc limit 7",
        ):
            via_cluster = requests.post(f"{coord.url}/v1/query", json={"sql": sql}).json()
            via_local = local.query(sql)
            assert [tuple(r) for r in via_cluster["rows"]] == via_local.rows
        local.close()

    def test_health_endpoints(self, cluster):
        tmp_path, coord, workers = cluster
        assert requests.get(f"{coord.url}/v1/health").json()["role"] == "coordinator"
        assert requests.get(f"{workers[0].url}/v1/health").json()["role"] == "worker"
