"""HTTP backend for the annotation UI.

Endpoints:
  GET /pairs             -> JSON list of {id, image_url, annotation_url, size}
  GET /image/<id>        -> stacked image bytes
  GET /annotation/<id>   -> annotation XML, or 404
  PUT /annotation/<id>   -> validate XML against the schema, store atomically
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from PIL import Image

from .annotation import AnnotationSchemaError, DatasetIndex, parse_annotation


class AnnotationStore:
    """Dataset index plus serialized per-file annotation writes."""

    def __init__(self, index: DatasetIndex, annotations_dir: str | Path):
        self.annotations_dir = Path(annotations_dir)
        self.annotations_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.pairs: dict[str, Path] = {}
        for entry in index.entries:
            p = Path(entry.image_path)
            self.pairs[p.stem] = p

    def list_pairs(self):
        out = []
        for pair_id in sorted(self.pairs):
            with Image.open(self.pairs[pair_id]) as img:
                w, h = img.size
            out.append({
                "id": pair_id,
                "image_url": f"/image/{pair_id}",
                "annotation_url": f"/annotation/{pair_id}",
                "size": {"width": w, "height": h},
            })
        return out

    def image_bytes(self, pair_id: str) -> bytes | None:
        p = self.pairs.get(pair_id)
        return p.read_bytes() if p is not None and p.exists() else None

    def annotation_path(self, pair_id: str) -> Path:
        return self.annotations_dir / f"{pair_id}.xml"

    def read_annotation(self, pair_id: str) -> bytes | None:
        p = self.annotation_path(pair_id)
        return p.read_bytes() if p.exists() else None

    def write_annotation(self, pair_id: str, xml_bytes: bytes) -> None:
        parse_annotation(xml_bytes)  # schema gate; raises on bad input
        with self._lock:
            fd, tmp = tempfile.mkstemp(dir=self.annotations_dir, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(xml_bytes)
                os.replace(tmp, self.annotation_path(pair_id))
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)


def make_handler(store: AnnotationStore, ui_dir: Path | None = None):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, code: int, body: bytes, ctype: str = "application/json"):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/pairs":
                self._send(200, json.dumps(store.list_pairs()).encode())
            elif self.path.startswith("/image/"):
                data = store.image_bytes(self.path[len("/image/"):])
                if data is None:
                    self._send(404, b'{"error": "unknown pair"}')
                else:
                    self._send(200, data, "image/png")
            elif self.path.startswith("/annotation/"):
                data = store.read_annotation(self.path[len("/annotation/"):])
                if data is None:
                    self._send(404, b'{"error": "no annotation"}')
                else:
                    self._send(200, data, "application/xml")
            elif ui_dir is not None:
                name = "index.html" if self.path in ("/", "") else self.path.lstrip("/")
                f = (ui_dir / name).resolve()
                if f.is_file() and str(f).startswith(str(ui_dir.resolve()) + os.sep):
                    ctype = {"html": "text/html", "js": "text/javascript",
                             "css": "text/css"}.get(f.suffix.lstrip("."), "text/plain")
                    self._send(200, f.read_bytes(), ctype)
                else:
                    self._send(404, b'{"error": "not found"}')
            else:
                self._send(404, b'{"error": "not found"}')

        def do_PUT(self):
            if not self.path.startswith("/annotation/"):
                self._send(404, b'{"error": "not found"}')
                return
            pair_id = self.path[len("/annotation/"):]
            if pair_id not in store.pairs:
                self._send(404, b'{"error": "unknown pair"}')
                return
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length)
            try:
                store.write_annotation(pair_id, body)
            except AnnotationSchemaError as e:
                self._send(422, json.dumps({"error": str(e)}).encode())
                return
            except OSError as e:
                self._send(409, json.dumps({"error": str(e)}).encode())
                return
            self._send(200, b'{"ok": true}')

    return Handler


def serve(index: DatasetIndex, annotations_dir, bind_address: str = "127.0.0.1:8760",
          ui_dir: Path | None = None) -> ThreadingHTTPServer:
    """Build (but do not start) the HTTP server; caller runs serve_forever."""
    host, port = bind_address.rsplit(":", 1)
    store = AnnotationStore(index, annotations_dir)
    return ThreadingHTTPServer((host, int(port)), make_handler(store, ui_dir))
