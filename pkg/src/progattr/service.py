"""Minimal HTTP prediction service for one article model.

Endpoints:

``GET /healthz``
    ``{"status": "ok"}``
``POST /articles/{article}/predict``
    body ``{"shape": [C, H, W], "features_hex": "<float32 LE hex>", "top_k": 3}``
    or ``{"features_path": "..."}`` / ``{"features": [...nested...]}``
``POST /reload``
    body ``{}`` or ``{"path": "..."}``; swaps the model only if loading succeeds.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

import numpy as np

from .persistence import load_model

logger = logging.getLogger(__name__)


class BadRequest(Exception):
    pass


def decode_features(payload: dict, expected: tuple) -> np.ndarray:
    """Batch of images from a request body; a single image gets a batch axis."""
    if not isinstance(payload, dict):
        raise BadRequest("request body must be a JSON object")
    if "features_hex" in payload:
        if "shape" not in payload:
            raise BadRequest("features_hex needs a shape")
        try:
            raw = bytes.fromhex(payload["features_hex"])
        except (TypeError, ValueError) as exc:
            raise BadRequest(f"features_hex is not hexadecimal: {exc}") from None
        shape = tuple(int(s) for s in payload["shape"])
        if len(raw) != 4 * int(np.prod(shape)):
            raise BadRequest(f"{len(raw)} bytes do not fill shape {list(shape)}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    elif "features_path" in payload:
        try:
            raw = Path(payload["features_path"]).read_bytes()
        except OSError as exc:
            raise BadRequest(f"cannot read features_path: {exc}") from None
        if len(raw) != 4 * int(np.prod(expected)):
            raise BadRequest(f"feature file has {len(raw)} bytes, expected shape {list(expected)}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(expected)
    elif "features" in payload:
        try:
            arr = np.asarray(payload["features"], dtype=np.float32)
        except (TypeError, ValueError) as exc:
            raise BadRequest(f"features is not a numeric array: {exc}") from None
    else:
        raise BadRequest("body needs features_hex, features_path or features")
    if arr.shape == expected:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise BadRequest(f"features of shape {list(arr.shape)} do not match {list(expected)}")
    if not np.all(np.isfinite(arr)):
        raise BadRequest("features contain non-finite values")
    return arr


def predict_response(model, features: np.ndarray, top_k: Optional[int] = None) -> dict:
    probs = model.predict_proba(features)
    results = []
    for i in range(features.shape[0]):
        per_attr = {}
        for attr, p in probs.items():
            row = p[i].astype(np.float64)
            if model.kind == "multilabel":
                row = row / row.sum()
            names = model.schema[attr].class_names
            k = len(names) if top_k is None else max(1, min(int(top_k), len(names)))
            order = np.argsort(-row, kind="stable")[:k]
            per_attr[attr] = [{"class": names[j], "probability": float(row[j])} for j in order]
        results.append(per_attr)
    body = {"article": model.schema.article, "attributes": results[0]}
    if len(results) > 1:
        body["batch"] = results
    return body


class ModelHolder:
    """The served model; replaced wholesale on reload, never mutated."""

    def __init__(self, path):
        self.path = Path(path)
        self.model = load_model(self.path)
        self._lock = threading.Lock()

    def reload(self, path=None) -> None:
        with self._lock:
            target = Path(path) if path else self.path
            fresh = load_model(target)
            self.model, self.path = fresh, target


def make_handler(holder: ModelHolder):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug(fmt, *args)

        def _send(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            if not raw:
                return {}
            try:
                return json.loads(raw)
            except json.JSONDecodeError as exc:
                raise BadRequest(f"malformed JSON: {exc}") from None

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, {"status": "ok", "article": holder.model.schema.article})
            else:
                self._send(404, {"error": f"no route {self.path}"})

        def do_POST(self):
            parts = self.path.strip("/").split("/")
            try:
                if parts == ["reload"]:
                    body = self._body()
                    try:
                        holder.reload(body.get("path") if isinstance(body, dict) else None)
                    except Exception as exc:  # old model stays in service
                        self._send(500, {"error": f"reload failed: {exc}"})
                        return
                    self._send(200, {"status": "reloaded", "path": str(holder.path)})
                elif len(parts) == 3 and parts[0] == "articles" and parts[2] == "predict":
                    model = holder.model
                    if parts[1].lower() != model.schema.article.lower():
                        self._send(404, {"error": f"this service serves {model.schema.article!r}"})
                        return
                    body = self._body()
                    c = model.config
                    feats = decode_features(body, (c.input_channels, c.input_size, c.input_size))
                    self._send(200, predict_response(model, feats, body.get("top_k")))
                else:
                    self._send(404, {"error": f"no route {self.path}"})
            except BadRequest as exc:
                self._send(400, {"error": str(exc)})
            except Exception as exc:
                logger.exception("predict failed")
                self._send(500, {"error": str(exc)})

    return Handler


def make_server(model_path, host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
    holder = ModelHolder(model_path)
    server = ThreadingHTTPServer((host, port), make_handler(holder))
    server.holder = holder
    return server


def serve(model_path, bind: str = "127.0.0.1:8000") -> None:
    host, _, port = bind.rpartition(":")
    server = make_server(model_path, host or "127.0.0.1", int(port))
    logger.info("serving %s on %s:%d", model_path, *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()
