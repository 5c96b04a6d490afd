"""HTTP inference service over a frozen checkpoint.

Exposes the layout catalog and per-request synthesis so sliders in the
studio UI (or any script) can steer one segment per noise dimension.
Handlers share one immutable ServeState; identical requests produce
byte-identical responses.
"""
from __future__ import annotations

import base64
import json
import struct
import threading
import zlib
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .data import (DataError, NoiseVector, SemanticLayout, io_read_layout,
                   quantize_u8, tensor_to_image)
from .training import load_generator


class ServeError(RuntimeError):
    pass


def encode_png(rgb_u8: np.ndarray) -> bytes:
    """Minimal RGB8 PNG encoder (no filtering), deterministic bytes."""
    h, w, _ = rgb_u8.shape
    raw = b"".join(b"\x00" + rgb_u8[y].tobytes() for y in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


@dataclass
class ServeState:
    generator: object
    class_count: int
    class_names: list[str]
    palette: list[list[float]]
    image_size: int
    layouts: dict[str, SemanticLayout]

    def synthesize_png(self, layout: SemanticLayout, noise: NoiseVector) -> bytes:
        out = self.generator.generate(layout, noise)
        return encode_png(quantize_u8(tensor_to_image(out).values))


def build_state(checkpoint_path, layouts_dir) -> ServeState:
    generator, meta = load_generator(checkpoint_path)
    world = meta.get("world") or {}
    class_count = generator.class_count
    class_names = world.get("class_names") or [f"class{c}" for c in range(class_count)]
    palette = world.get("palette") or [[1.0, 1.0, 1.0]] * class_count
    layouts = {}
    for p in sorted(Path(layouts_dir).glob("*.pgm")):
        layouts[p.stem] = io_read_layout(p, classes=class_count)
    if not layouts:
        raise ServeError(f"no .pgm layouts found in {layouts_dir}")
    size = next(iter(layouts.values())).height
    return ServeState(generator=generator, class_count=class_count,
                      class_names=list(class_names),
                      palette=[list(map(float, c)) for c in palette],
                      image_size=size, layouts=layouts)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _round6(x: float) -> float:
    return float(round(float(x), 6))


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    state: ServeState = None  # assigned by make_server

    def log_message(self, fmt, *args):  # silence default stderr chatter
        pass

    # -- plumbing ----------------------------------------------------------
    def _send(self, code: int, body: bytes, ctype: str, extra: dict | None = None):
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        for k, v in (extra or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, code: int, obj, extra: dict | None = None):
        self._send(code, _canonical_json(obj), "application/json; charset=utf-8", extra)

    def _fail(self, code: int, message: str):
        self._send_json(code, {"error": message})

    def _read_json(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return None

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    # -- routes ------------------------------------------------------------
    def do_GET(self):
        st = self.state
        if self.path == "/api/meta":
            self._send_json(200, {
                "class_count": st.class_count,
                "class_names": st.class_names,
                "layout_ids": sorted(st.layouts),
                "image_size": st.image_size,
            })
            return
        if self.path.startswith("/api/layout/"):
            lid = self.path[len("/api/layout/"):]
            layout = st.layouts.get(lid)
            if layout is None:
                self._fail(404, f"unknown layout id {lid!r}")
                return
            self._send_json(200, {
                "width": layout.width,
                "height": layout.height,
                "pixels": [int(v) for v in layout.pixels.reshape(-1)],
                "palette": st.palette,
            })
            return
        self._fail(404, f"no such route {self.path}")

    def do_POST(self):
        st = self.state
        body = self._read_json()
        if body is None:
            self._fail(400, "body must be valid JSON")
            return
        if self.path == "/api/synthesize":
            self._synthesize(st, body)
        elif self.path == "/api/sweep":
            self._sweep(st, body)
        else:
            self._fail(404, f"no such route {self.path}")

    def _parse_noise(self, st: ServeState, raw):
        if not isinstance(raw, list) or len(raw) != st.class_count or \
                not all(isinstance(v, (int, float)) for v in raw):
            return None, None
        arr = np.asarray(raw, dtype=np.float64)
        clamped = np.clip(arr, -1.0, 1.0)
        touched = [i for i in range(len(arr)) if clamped[i] != arr[i]]
        return NoiseVector(clamped), touched

    def _synthesize(self, st: ServeState, body: dict):
        layout = st.layouts.get(str(body.get("layout_id")))
        if layout is None:
            self._fail(404, f"unknown layout id {body.get('layout_id')!r}")
            return
        noise, touched = self._parse_noise(st, body.get("noise"))
        if noise is None:
            self._fail(400, f"noise must be a list of {st.class_count} numbers")
            return
        png = st.synthesize_png(layout, noise)
        extra = {}
        if touched:
            extra["X-Noise-Clamped"] = ",".join(str(i) for i in touched)
        self._send(200, png, "image/png", extra)

    def _sweep(self, st: ServeState, body: dict):
        layout = st.layouts.get(str(body.get("layout_id")))
        if layout is None:
            self._fail(404, f"unknown layout id {body.get('layout_id')!r}")
            return
        cls = body.get("class")
        if not isinstance(cls, int) or not 0 <= cls < st.class_count:
            self._fail(400, f"class must be an integer in [0,{st.class_count})")
            return
        steps = body.get("steps") or [-1.0, -0.5, 0.0, 0.5, 1.0]
        if not isinstance(steps, list) or len(steps) < 2 or \
                not all(isinstance(v, (int, float)) for v in steps):
            self._fail(400, "steps must be a list of at least 2 numbers")
            return
        images = []
        used = []
        for v in steps:
            entries = np.zeros(st.class_count)
            entries[cls] = min(max(float(v), -1.0), 1.0)
            used.append(_round6(entries[cls]))
            images.append(base64.b64encode(
                st.synthesize_png(layout, NoiseVector(entries))).decode("ascii"))
        self._send_json(200, {"format": "png_base64", "class": cls,
                              "steps": used, "images": images})


def make_server(state: ServeState, bind: str = "127.0.0.1", port: int = 7878) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"state": state})
    return ThreadingHTTPServer((bind, port), handler)


def serve(checkpoint_path, layouts_dir, bind: str = "127.0.0.1", port: int = 7878):
    state = build_state(checkpoint_path, layouts_dir)
    server = make_server(state, bind, port)
    print(f"serving {len(state.layouts)} layouts on http://{bind}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def start_background(state: ServeState, bind: str = "127.0.0.1", port: int = 0):
    """Start a server on a daemon thread; returns (server, base_url)."""
    server = make_server(state, bind, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, actual_port = server.server_address[:2]
    return server, f"http://{host}:{actual_port}"
