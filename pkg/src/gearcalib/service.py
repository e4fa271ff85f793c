"""Read-only HTTP facade over a calibration pack.

The widget and other clients query calibrations and paired-mode ratio
predictions without reimplementing any math; every response is a pure
function of the loaded pack and the request body.  The pack is validated
against its schema at startup and never mutated, so request handling needs
no locks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .calibration import CalibrationError, apply_calibration, validate_pack
from .ratio_prediction import (
    RatioRegressionError,
    RatioRegressionModel,
    model_from_json,
    predict_pooled_ratio,
)


@dataclass(frozen=True)
class ServiceConfig:
    pack_path: Path
    host: str = "127.0.0.1"
    port: int = 8250
    cors_origins: tuple[str, ...] = ()


class PackState:
    """Immutable pack bytes, parsed document, and rebuilt paired-mode models."""

    def __init__(self, pack_path: Path):
        self.raw = Path(pack_path).read_bytes()
        self.doc = json.loads(self.raw)
        validate_pack(self.doc)
        self.etag = '"' + hashlib.sha256(self.raw).hexdigest() + '"'
        self.paired: dict[str, RatioRegressionModel] = {
            cam: model_from_json(cam, entry)
            for cam, entry in self.doc.get("paired", {}).items()
        }


class _BadRequest(ValueError):
    pass


def _require_int(body: dict, key: str) -> int:
    value = body.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise _BadRequest(f"{key!r} must be an integer")
    return value


def _require_number(body: dict, key: str) -> float:
    value = body.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _BadRequest(f"{key!r} must be a number")
    return float(value)


def handle_calibrate(state: PackState, body: dict) -> dict:
    camera = body.get("camera")
    if camera not in state.doc["cameras"]:
        raise _BadRequest(f"unknown camera {camera!r}")
    maxn = _require_int(body, "maxn")
    if maxn < 0:
        raise _BadRequest("'maxn' must be nonnegative")
    estimate, approx_se = apply_calibration(state.doc, camera, maxn)
    return {
        "camera": camera,
        "maxn": maxn,
        "estimate": estimate,
        "approx_se": approx_se,
        "calibration_error_context": state.doc["cameras"][camera]["calibration_error"],
    }


def handle_predict_ratio(state: PackState, body: dict) -> dict:
    camera = body.get("camera")
    if camera not in state.paired:
        raise _BadRequest(f"no paired-mode model for camera {camera!r}")
    maxn = _require_int(body, "maxn")
    camratio = _require_number(body, "camratio")
    try:
        pred = predict_pooled_ratio(state.paired[camera], maxn, camratio)
    except RatioRegressionError as exc:
        raise _BadRequest(str(exc)) from None
    entry = state.doc["paired"][camera]
    return {
        "camera": camera,
        "maxn": maxn,
        "camratio": camratio,
        "r_hat": pred.r_hat,
        "pred_se": pred.pred_se,
        "flags": list(pred.flags),
        "caveat": entry["caveat"],
    }


def make_handler(state: PackState, cors_origins: tuple[str, ...]):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _cors_headers(self) -> list[tuple[str, str]]:
            origin = self.headers.get("Origin")
            if origin and (origin in cors_origins or "*" in cors_origins):
                return [
                    ("Access-Control-Allow-Origin", origin),
                    ("Access-Control-Allow-Methods", "GET, POST, OPTIONS"),
                    ("Access-Control-Allow-Headers", "Content-Type"),
                ]
            return []

        def _send(self, status: int, payload: bytes, content_type: str,
                  extra: list[tuple[str, str]] | None = None) -> None:
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(payload)))
            for k, v in self._cors_headers() + (extra or []):
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(payload)

        def _send_json(self, status: int, doc: dict) -> None:
            self._send(status, json.dumps(doc, sort_keys=True).encode(), "application/json")

        def do_OPTIONS(self):  # CORS preflight
            self._send(204, b"", "text/plain")

        def do_GET(self):
            if self.path == "/pack":
                self._send(200, state.raw, "application/json", [("ETag", state.etag)])
            else:
                self._send_json(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            handlers = {"/calibrate": handle_calibrate, "/predict-ratio": handle_predict_ratio}
            handler = handlers.get(self.path)
            if handler is None:
                self._send_json(404, {"error": f"unknown path {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
                if not isinstance(body, dict):
                    raise _BadRequest("request body must be a JSON object")
                self._send_json(200, handler(state, body))
            except (_BadRequest, CalibrationError) as exc:
                self._send_json(400, {"error": str(exc)})
            except json.JSONDecodeError:
                self._send_json(400, {"error": "request body is not valid JSON"})

    return Handler


def make_server(config: ServiceConfig) -> ThreadingHTTPServer:
    state = PackState(config.pack_path)
    handler = make_handler(state, config.cors_origins)
    return ThreadingHTTPServer((config.host, config.port), handler)


def serve(config: ServiceConfig) -> None:
    server = make_server(config)
    host, port = server.server_address[:2]
    print(f"serving pack {config.pack_path} on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
