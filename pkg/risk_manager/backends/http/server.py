"""Local HTTP server for the advise service.

Runs in a background thread and answers:
- GET  /health                  -> service status
- GET  /advise?n=K&policy=P     -> ranking head and top reports
- POST /snapshot[?as_of=DATE]   -> rebuild from a posted CVE feed
"""

from __future__ import annotations

import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlsplit

from risk_manager.backends.http.handlers import advise_handler
from risk_manager.core.interfaces import SnapshotStore
from risk_manager.core.service import ServiceContext

logger = logging.getLogger(__name__)


def _request_handler(store: SnapshotStore, context: ServiceContext) -> type[BaseHTTPRequestHandler]:
    class AdviseRequestHandler(BaseHTTPRequestHandler):
        def do_GET(self):
            self._dispatch("GET", b"")

        def do_POST(self):
            content_length = int(self.headers.get("Content-Length", 0))
            self._dispatch("POST", self.rfile.read(content_length) if content_length else b"")

        def _dispatch(self, method: str, body: bytes):
            url = urlsplit(self.path)
            event = {
                "requestContext": {"http": {"method": method}},
                "rawPath": url.path,
                "queryStringParameters": dict(parse_qsl(url.query)),
                "body": body,
            }
            try:
                response = advise_handler(event, store, context)
            except Exception:
                logger.exception("Unhandled error for %s %s", method, self.path)
                response = {"statusCode": 500, "headers": {"Content-Type": "application/json"},
                            "body": '{"error": "internal error"}'}
            self.send_response(response["statusCode"])
            for name, value in response["headers"].items():
                self.send_header(name, value)
            self.end_headers()
            self.wfile.write(response["body"].encode("utf-8"))

        def log_message(self, format, *args):
            pass  # per-request access logs stay quiet

    return AdviseRequestHandler


class AdviseServer:
    def __init__(self, store: SnapshotStore, context: ServiceContext, host: str = "127.0.0.1", port: int = 0):
        self.server = ThreadingHTTPServer((host, port), _request_handler(store, context))
        self.host = host
        self.port = self.server.server_address[1]  # actual port (0 = auto-assign)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self):
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        logger.info("Advise service listening on %s", self.url)

    def serve_forever(self):
        logger.info("Advise service listening on %s", self.url)
        try:
            self.server.serve_forever()
        finally:
            self.server.server_close()

    def stop(self):
        self.server.shutdown()
        if self._thread:
            self._thread.join(timeout=5)
        self.server.server_close()
