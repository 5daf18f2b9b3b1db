"""Minimal attention server speaking the ``POST /ground`` JSON protocol.

Useful for exercising :class:`stagecrop.backends.HttpBackend` without a
real model. It answers with a Gaussian blob at the image center, and can be
switched into failure modes to test client error handling::

    python -m stagecrop.stub_server --port 8765 --patch-px 28
"""

from __future__ import annotations

import argparse
import base64
import io
import json
import math
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

MODES = ("ok", "slow", "missing_attention", "wrong_grid", "error_500", "not_json")


def center_blob(width: int, height: int, patch_px: int, sigma_px: float = 40.0) -> list[list[float]]:
    rows, cols = math.ceil(height / patch_px), math.ceil(width / patch_px)
    xs = (np.arange(cols) + 0.5) * patch_px
    ys = (np.arange(rows) + 0.5) * patch_px
    d2 = (xs[None, :] - width / 2) ** 2 + (ys[:, None] - height / 2) ** 2
    w = np.exp(-d2 / (2 * sigma_px ** 2))
    return (w / w.max()).tolist()


class _Handler(BaseHTTPRequestHandler):
    server: "StubServer"

    def log_message(self, fmt, *args):
        pass

    def _send(self, status: int, body: bytes, ctype="application/json"):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        if self.path.rstrip("/") != "/ground":
            self._send(404, b'{"error": "not found"}')
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            req = json.loads(self.rfile.read(length))
            png = base64.b64decode(req["image_b64"])
            from PIL import Image

            with Image.open(io.BytesIO(png)) as img:
                width, height = img.size
        except Exception as e:  # noqa: BLE001 - any bad request is a 400
            self._send(400, json.dumps({"error": str(e)}).encode())
            return

        srv = self.server
        mode = srv.mode
        self.server.requests.append({"instruction": req.get("instruction"),
                                     "stage": req.get("stage"), "size": [width, height]})
        if mode == "slow":
            time.sleep(srv.delay_s)
        if mode == "error_500":
            self._send(500, b'{"error": "boom"}')
            return
        if mode == "not_json":
            self._send(200, b"<html>nope</html>", ctype="text/html")
            return

        patch = srv.patch_px
        if mode == "wrong_grid":
            # one patch short in each direction
            attn = center_blob(max(width - patch, 1), max(height - patch, 1), patch)
        else:
            attn = center_blob(width, height, patch)
        reply = {"attention": attn, "patch_px": patch, "tool_call": srv.tool_call,
                 "raw_text": f"<tool_call>{srv.tool_call}</tool_call>" if srv.tool_call else ""}
        if mode == "missing_attention":
            del reply["attention"]
        self._send(200, json.dumps(reply).encode())


class StubServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, patch_px: int = 28,
                 mode: str = "ok", tool_call: str | None = "no", delay_s: float = 2.0):
        super().__init__((host, port), _Handler)
        self.patch_px = patch_px
        self.mode = mode
        self.tool_call = tool_call
        self.delay_s = delay_s
        self.requests: list[dict] = []
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--patch-px", type=int, default=28)
    p.add_argument("--mode", choices=MODES, default="ok")
    p.add_argument("--tool-call", choices=["yes", "no", "none"], default="no")
    args = p.parse_args(argv)
    srv = StubServer(args.host, args.port, args.patch_px, args.mode,
                     None if args.tool_call == "none" else args.tool_call)
    print(f"serving on {srv.url}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()


if __name__ == "__main__":
    main()
