"""HTTP server speaking the inference wire protocol.

One POST route per capability, JSON bodies, images as base64 PNG fields:

- ``/api/tokenize``  ``{"model", "text"}`` -> ``{"tokens": [int...]}``;
  decode mode ``{"model", "tokens": [int...]}`` -> ``{"text": str}``
- ``/api/embed``     ``{"model", "text"}`` or ``{"model", "image": b64}``
  -> ``{"embedding": [float...]}``
- ``/api/upscale``   ``{"image": b64, "factor": int}`` -> ``{"image": b64}``
- ``/api/detect``    ``{"image": b64}`` -> ``{"detections": [...]}``

Errors are non-2xx with ``{"error": text}`` bodies; routes outside the enabled
capability set answer 501. Request handling is threaded, but every model
invocation is serialized behind one lock so a single compute device is never
entered concurrently.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from .backends import (
    BackendResolutionError,
    BadRequestError,
    build_detector,
    build_encoder,
    build_upscaler,
)
from .config import ShimConfig, ShimConfigError, parse_args

logger = logging.getLogger(__name__)

ROUTE_CHAT = "/api/chat"
ROUTE_TOKENIZE = "/api/tokenize"
ROUTE_EMBED = "/api/embed"
ROUTE_UPSCALE = "/api/upscale"
ROUTE_DETECT = "/api/detect"

_CAPABILITY_BY_ROUTE = {
    ROUTE_CHAT: "chat",  # never enabled here; chat stays on a dedicated server
    ROUTE_TOKENIZE: "tokenize",
    ROUTE_EMBED: "embed",
    ROUTE_UPSCALE: "upscale",
    ROUTE_DETECT: "detect",
}


def _decode_image(data) -> np.ndarray:
    if not isinstance(data, str):
        raise BadRequestError("'image' must be a base64 string")
    try:
        raw = base64.b64decode(data, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except BadRequestError:
        raise
    except Exception as exc:
        raise BadRequestError(f"undecodable image payload: {exc}") from exc


def _encode_image(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class ShimServer(ThreadingHTTPServer):
    """Protocol server bound to one encoder and optional image backends."""

    daemon_threads = True

    def __init__(self, config: ShimConfig, encoder=None) -> None:
        self.config = config
        self.encoder = encoder if encoder is not None else build_encoder(config)
        self.upscaler = build_upscaler(config.sr_backend) if config.sr_backend else None
        self.detector = build_detector(config.detector_backend) if config.detector_backend else None
        self.capabilities = frozenset(config.capabilities)
        self.inference_lock = threading.Lock()
        super().__init__((config.host, config.port), _ShimHandler)

    # -- request handlers, one per route ------------------------------------

    def handle_tokenize(self, payload: dict) -> dict:
        if "tokens" in payload:
            tokens = payload["tokens"]
            if not isinstance(tokens, list) or not tokens or not all(isinstance(t, int) for t in tokens):
                raise BadRequestError("'tokens' must be a non-empty list of integers")
            return {"text": self.encoder.decode(tokens)}
        text = payload.get("text")
        if not isinstance(text, str) or not text:
            raise BadRequestError("'text' must be a non-empty string")
        return {"tokens": self.encoder.tokenize(text)}

    def handle_embed(self, payload: dict) -> dict:
        has_text, has_image = "text" in payload, "image" in payload
        if has_text == has_image:
            raise BadRequestError("embed needs exactly one of 'text' or 'image'")
        if has_text:
            text = payload["text"]
            if not isinstance(text, str) or not text:
                raise BadRequestError("'text' must be a non-empty string")
            n_tokens = len(self.encoder.tokenize(text))
            if n_tokens > self.encoder.max_content_tokens:
                raise BadRequestError(
                    f"text tokenizes to {n_tokens} tokens, over the "
                    f"{self.encoder.max_content_tokens}-token limit; chunk before embedding"
                )
            with self.inference_lock:
                vector = self.encoder.embed_text(text)
        else:
            image = _decode_image(payload["image"])
            with self.inference_lock:
                vector = self.encoder.embed_image(image)
        return {"embedding": [float(v) for v in vector]}

    def handle_upscale(self, payload: dict) -> dict:
        factor = payload.get("factor")
        if not isinstance(factor, int) or isinstance(factor, bool) or factor < 1:
            raise BadRequestError("'factor' must be a positive integer")
        image = _decode_image(payload.get("image"))
        with self.inference_lock:
            upscaled = self.upscaler(image, factor)
        return {"image": _encode_image(upscaled)}

    def handle_detect(self, payload: dict) -> dict:
        image = _decode_image(payload.get("image"))
        with self.inference_lock:
            return {"detections": self.detector(image)}

    def dispatch(self, route: str, payload: dict) -> tuple[int, dict]:
        capability = _CAPABILITY_BY_ROUTE.get(route)
        if capability is None:
            return 404, {"error": f"unknown route {route}"}
        if capability not in self.capabilities:
            return 501, {"error": "capability not configured"}
        handler = {
            ROUTE_TOKENIZE: self.handle_tokenize,
            ROUTE_EMBED: self.handle_embed,
            ROUTE_UPSCALE: self.handle_upscale,
            ROUTE_DETECT: self.handle_detect,
        }[route]
        try:
            return 200, handler(payload)
        except BadRequestError as exc:
            return 400, {"error": str(exc)}
        except Exception as exc:  # keep the server alive on backend faults
            logger.exception("unhandled error on %s", route)
            return 500, {"error": f"internal error: {exc}"}


class _ShimHandler(BaseHTTPRequestHandler):
    server_version = "clip-shim/0.1"

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            if not isinstance(payload, dict):
                raise ValueError("body must be a JSON object")
        except (ValueError, UnicodeDecodeError) as exc:
            self._respond(400, {"error": f"bad request body: {exc}"})
            return
        status, body = self.server.dispatch(self.path, payload)  # type: ignore[attr-defined]
        self._respond(status, body)

    def _respond(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args) -> None:  # noqa: A002
        logger.debug("clip-shim: " + format, *args)


def create_server(config: ShimConfig, encoder=None) -> ShimServer:
    """Bind a server for ``config``; backend resolution failures raise here."""
    return ShimServer(config, encoder=encoder)


def main(argv: list[str] | None = None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    config = parse_args(argv)
    try:
        server = create_server(config)
    except (ShimConfigError, BackendResolutionError) as exc:
        print(f"startup error: {exc}", file=sys.stderr)
        sys.exit(2)
    host, port = server.server_address[:2]
    print(
        f"clip-shim serving at http://{host}:{port} "
        f"(model: {server.encoder.name}; capabilities: {', '.join(config.capabilities)})",
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
