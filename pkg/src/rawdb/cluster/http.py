"""Minimal JSON-over-HTTP server used by both cluster roles."""

from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

log = logging.getLogger(__name__)

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
    ".svg": "image/svg+xml",
}


class StaticDir:
    """Marker response: serve a file from a directory."""

    def __init__(self, directory: Path, rel: str):
        self.directory = directory
        self.rel = rel


class JsonHttpServer:
    """Routes (method, path regex) to handlers returning (status, payload).

    Payloads are JSON-encoded dicts/lists, or a StaticDir for assets.
    """

    def __init__(self, routes, host: str = "127.0.0.1", port: int = 0, name: str = "http"):
        self.routes = [(m, re.compile(p + r"\Z"), h) for m, p, h in routes]
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("%s %s", self.address_string(), fmt % args)

            def _dispatch(self, method):
                body = None
                length = int(self.headers.get("Content-Length") or 0)
                if length:
                    raw = self.rfile.read(length)
                    try:
                        body = json.loads(raw)
                    except json.JSONDecodeError:
                        self._send(400, {"error": "invalid JSON body"})
                        return
                for m, pat, handler in outer.routes:
                    if m != method:
                        continue
                    match = pat.match(self.path.split("?", 1)[0])
                    if match:
                        try:
                            status, payload = handler(match, body)
                        except Exception as e:  # noqa: BLE001 - wire boundary
                            log.exception("handler failed for %s %s", method, self.path)
                            status, payload = 500, {"error": f"{type(e).__name__}: {e}"}
                        self._send(status, payload)
                        return
                self._send(404, {"error": f"no route for {method} {self.path}"})

            def _send(self, status, payload):
                if isinstance(payload, StaticDir):
                    self._send_file(payload)
                    return
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def _send_file(self, st: StaticDir):
                rel = st.rel or "index.html"
                target = (st.directory / rel).resolve()
                if not str(target).startswith(str(st.directory.resolve())) or not target.is_file():
                    self._send(404, {"error": f"no asset {rel!r}"})
                    return
                data = target.read_bytes()
                self.send_response(200)
                self.send_header(
                    "Content-Type", _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
                )
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self.host = host
        self.port = self._server.server_address[1]
        self.url = f"http://{host}:{self.port}"
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            daemon=True,
            name=name,
        )

    def start(self) -> "JsonHttpServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
