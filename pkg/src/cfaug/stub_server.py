"""Minimal in-process infill service speaking the ``POST /infill`` protocol.

Used to exercise :class:`cfaug.generation.RemoteBackend` without a real
seq2seq model. Each sentinel is replaced by ``fill_word``. The server can
be told to fail the first N requests with 503, to echo its input
unchanged (leaving sentinels in place), or to hold each request for a
while so concurrency limits are observable.

    python -m cfaug.stub_server --port 8765
"""

from __future__ import annotations

import argparse
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class StubInfillServer:
    def __init__(self, fill_word: str = "fine", fail_first: int = 0, echo: bool = False,
                 delay: float = 0.0, port: int = 0):
        self.fill_word = fill_word
        self.fail_first = fail_first
        self.echo = echo
        self.delay = delay
        self.requests: list[dict] = []
        self.max_concurrent = 0
        self._active = 0
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), self._handler())
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def _reply(self, status: int, body: dict) -> None:
                data = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    req = json.loads(self.rfile.read(length))
                except ValueError:
                    return self._reply(400, {"error": "invalid json"})
                if self.path != "/infill":
                    return self._reply(404, {"error": "not found"})
                with server._lock:
                    server.requests.append(req)
                    n = len(server.requests)
                    server._active += 1
                    server.max_concurrent = max(server.max_concurrent, server._active)
                try:
                    if server.delay:
                        time.sleep(server.delay)
                    if n <= server.fail_first:
                        return self._reply(503, {"error": "warming up"})
                    text = req["text"]
                    if not server.echo:
                        text = text.replace(req["mask_token"], server.fill_word)
                    return self._reply(200, {"text": text})
                finally:
                    with server._lock:
                        server._active -= 1

        return Handler

    def start(self) -> "StubInfillServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:  # shutdown() blocks unless serve_forever is running
            self._httpd.shutdown()
            self._thread.join()
            self._thread = None
        self._httpd.server_close()

    def __enter__(self) -> "StubInfillServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--fill-word", default="fine")
    args = ap.parse_args()
    server = StubInfillServer(args.fill_word, port=args.port)
    print(f"serving on {server.base_url}/infill")
    try:
        server._httpd.serve_forever()
    except KeyboardInterrupt:
        server.stop()


if __name__ == "__main__":
    main()
