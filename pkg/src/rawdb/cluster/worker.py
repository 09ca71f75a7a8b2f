"""Worker role: executes scan fragments over its local block files.

Workers are stateless beyond their block directory and caches: every fragment
carries the block descriptors it needs. A worker registers with the
coordinator on startup and heartbeats from then on.
"""

from __future__ import annotations

import logging
import threading
import time

import requests

from ..blocks import NodeStore, checksum64, BlockMeta
from ..node import NodeRuntime
from .http import JsonHttpServer

log = logging.getLogger(__name__)


class Worker:
    def __init__(
        self,
        node_id: str,
        root,
        coordinator_url: str | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        heartbeat_s: float = 1.0,
        fault_injection: bool = False,
        kernel: str = "vector",
        memory_cap: int = 4 << 30,
    ):
        self.node_id = node_id
        self.store = NodeStore(node_id, root, memory_cap=memory_cap)
        self.runtime = NodeRuntime(self.store, kernel)
        self.coordinator_url = coordinator_url
        self.heartbeat_s = heartbeat_s
        self.fault_injection = fault_injection
        self.slow_ms = 0.0
        self.fragments_executed = 0
        self._stop = threading.Event()
        self._hb_thread: threading.Thread | None = None
        self.server = JsonHttpServer(
            [
                ("POST", r"/v1/fragment", self._h_fragment),
                ("POST", r"/v1/read_block", self._h_read_block),
                ("GET", r"/v1/health", self._h_health),
                ("POST", r"/v1/kill", self._h_kill),
                ("POST", r"/v1/slow", self._h_slow),
            ],
            host=host,
            port=port,
            name=f"worker-{node_id}",
        )
        self.url = self.server.url

    # ---- lifecycle -------------------------------------------------------

    def start(self) -> "Worker":
        self.server.start()
        if self.coordinator_url:
            self._register()
            self._hb_thread = threading.Thread(
                target=self._heartbeat_loop, daemon=True, name=f"hb-{self.node_id}"
            )
            self._hb_thread.start()
        return self

    def _register(self) -> None:
        requests.post(
            f"{self.coordinator_url}/v1/register",
            json={"node_id": self.node_id, "address": self.url},
            timeout=10,
        ).raise_for_status()

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_s / 2):
            try:
                requests.post(
                    f"{self.coordinator_url}/v1/heartbeat",
                    json={"node_id": self.node_id, "address": self.url},
                    timeout=5,
                )
            except requests.RequestException:
                pass

    def kill(self) -> None:
        """Stop responding entirely (process death stand-in)."""
        if self._stop.is_set():
            return
        self._stop.set()
        self.server.stop()

    stop = kill

    # ---- handlers -----------------------------------------------------------

    def _h_fragment(self, match, body):
        if self.slow_ms:
            time.sleep(self.slow_ms / 1000.0)
        resp = self.runtime.execute_fragment(body)
        self.fragments_executed += 1
        return 200, resp

    def _h_read_block(self, match, body):
        meta = BlockMeta.from_json(body["block"])
        data = self.store.read(meta.id)
        out = {"checksum": f"{checksum64(data):016x}", "length": len(data)}
        if not body.get("checksum_only"):
            import base64

            out["data"] = base64.b64encode(data).decode()
        return 200, out

    def _h_health(self, match, body):
        return 200, {
            "status": "ok",
            "role": "worker",
            "node_id": self.node_id,
            "fragments_executed": self.fragments_executed,
        }

    def _h_kill(self, match, body):
        if not self.fault_injection:
            return 403, {"error": "fault injection is disabled"}
        threading.Timer(0.05, self.kill).start()
        return 200, {"status": "dying"}

    def _h_slow(self, match, body):
        if not self.fault_injection:
            return 403, {"error": "fault injection is disabled"}
        self.slow_ms = float(body.get("ms", 0))
        return 200, {"status": "ok", "slow_ms": self.slow_ms}
