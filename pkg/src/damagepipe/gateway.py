"""Uniform client for the five inference capabilities the pipeline consumes.

One HTTP POST route per capability, JSON bodies, images as base64 PNG fields:

- ``/api/chat``      ``{"model", "prompt", "images": [b64...], "options": {"temperature", "seed"}}``
  -> ``{"response": text}``
- ``/api/tokenize``  ``{"model", "text"}`` -> ``{"tokens": [int...]}``; decode mode
  ``{"model", "tokens": [int...]}`` -> ``{"text": str}``
- ``/api/embed``     ``{"model", "text"}`` or ``{"model", "image": b64}`` -> ``{"embedding": [float...]}``
- ``/api/upscale``   ``{"image": b64, "factor": int}`` -> ``{"image": b64}``
- ``/api/detect``    ``{"image": b64}`` -> ``{"detections": [{"box": [x_min, y_min, x_max, y_max],
  "confidence": f, "class": s}...]}``

Errors come back as non-2xx responses with ``{"error": text}`` bodies.

The gateway, not the backend, enforces the embed token limit, unit
normalization of embeddings, and confidence-descending detection order, so
pipeline correctness does not depend on backend quirks. Transport failures are
retried with exponential backoff; protocol errors (non-2xx) are not.
"""

from __future__ import annotations

import base64
import io
import logging
import math
import threading
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image

from .geometry import BBox, ImageDims

logger = logging.getLogger(__name__)

ROUTE_CHAT = "/api/chat"
ROUTE_TOKENIZE = "/api/tokenize"
ROUTE_EMBED = "/api/embed"
ROUTE_UPSCALE = "/api/upscale"
ROUTE_DETECT = "/api/detect"

# Maximum content-token count accepted for a single embed text payload, as
# counted by the tokenize route (which excludes begin/end sentinels). Callers
# scoring longer text must pre-chunk; serving stacks whose full budget of 77
# includes two sentinel positions should be driven with a chunk limit of 75.
EMBED_TOKEN_LIMIT = 77

SUPPORTED_UPSCALE_FACTOR = 4


class GatewayError(Exception):
    """Base class for backend client errors."""


class TransportFailure(GatewayError):
    """Connection-level failure (refused, reset, timeout). Retried."""


class BackendUnavailableError(GatewayError):
    """Transport kept failing after all retries."""


class ProtocolError(GatewayError):
    """The backend answered, but outside the protocol (non-2xx or bad body)."""


class ContractViolationError(GatewayError):
    """The backend answered in-protocol but broke a stated contract."""


class EmptyInputError(GatewayError, ValueError):
    """An operation that needs content received an empty payload."""


class OverLengthTextError(ContractViolationError):
    """Text payload exceeds the embed token limit; callers must pre-chunk."""


class UnsupportedFactorError(GatewayError, ValueError):
    """Upscale factor other than the single supported value."""


@dataclass(frozen=True)
class BackendEndpoint:
    """Where to reach one capability and which model serves it."""

    base_url: str
    model_name: str
    timeout_s: float = 120.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError(f"timeout_s must be > 0, got {self.timeout_s}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


@dataclass(frozen=True)
class Embedding:
    """A unit-normalized embedding vector."""

    vector: tuple[float, ...]
    dim: int
    model_name: str

    def __post_init__(self) -> None:
        if self.dim < 1 or len(self.vector) != self.dim:
            raise ValueError(f"embedding dim {self.dim} does not match vector length {len(self.vector)}")
        if not all(math.isfinite(v) for v in self.vector):
            raise ValueError("embedding contains non-finite entries")


@dataclass(frozen=True)
class Detection:
    """One detected object in the queried image's pixel space."""

    bbox: BBox
    confidence: float
    class_name: str

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class ChatRequest:
    """A single VLM chat turn with up to two attached images (pre, post order)."""

    model_name: str
    prompt: str
    images: tuple[str, ...] = ()
    temperature: float = 0.0
    seed: int | None = 0

    def __post_init__(self) -> None:
        if len(self.images) > 2:
            raise ValueError(f"at most 2 images per request, got {len(self.images)}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


def encode_image(image: np.ndarray) -> str:
    """Encode an RGB uint8 array as base64 PNG (lossless, deterministic)."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 array, got shape {image.shape} dtype {image.dtype}")
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image(data: str) -> np.ndarray:
    """Decode a base64 PNG field back to an RGB uint8 array."""
    try:
        raw = base64.b64decode(data, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ProtocolError(f"undecodable image payload: {exc}") from exc


class HttpTransport:
    """Sends capability requests over HTTP using ``requests``."""

    def __init__(self, session: requests.Session | None = None) -> None:
        self._session = session or requests.Session()

    def post(self, endpoint: BackendEndpoint, route: str, payload: dict) -> dict:
        url = endpoint.base_url.rstrip("/") + route
        try:
            resp = self._session.post(url, json=payload, timeout=endpoint.timeout_s)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransportFailure(f"POST {url}: {exc}") from exc
        if not (200 <= resp.status_code < 300):
            excerpt = resp.text[:200]
            raise ProtocolError(f"POST {url} -> {resp.status_code}: {excerpt}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"POST {url}: response is not JSON: {resp.text[:200]}") from exc
        if not isinstance(body, dict):
            raise ProtocolError(f"POST {url}: expected JSON object, got {type(body).__name__}")
        return body


class Gateway:
    """Typed access to the five capabilities over a pluggable transport.

    Instances are immutable after construction and safe to share across
    threads; the internal call counter and per-endpoint embedding-dim registry
    use their own lock.
    """

    def __init__(self, transport, backoff_s: float = 1.0) -> None:
        self._transport = transport
        self._backoff_s = backoff_s
        self._lock = threading.Lock()
        self._calls: Counter[str] = Counter()
        self._embed_dims: dict[tuple[str, str], int] = {}

    @property
    def call_counts(self) -> dict[str, int]:
        """Completed round-trips per route (retried attempts count once)."""
        with self._lock:
            return dict(self._calls)

    def chat(self, endpoint: BackendEndpoint, request: ChatRequest) -> str:
        payload = {
            "model": request.model_name,
            "prompt": request.prompt,
            "images": list(request.images),
            "options": {"temperature": request.temperature, "seed": request.seed},
        }
        body = self._post(endpoint, ROUTE_CHAT, payload)
        response = body.get("response")
        if not isinstance(response, str):
            raise ProtocolError(f"chat response missing 'response' text field: {_excerpt(body)}")
        return response

    def tokenize(self, endpoint: BackendEndpoint, text: str) -> list[int]:
        if not text:
            raise EmptyInputError("cannot tokenize empty text")
        body = self._post(endpoint, ROUTE_TOKENIZE, {"model": endpoint.model_name, "text": text})
        tokens = body.get("tokens")
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise ProtocolError(f"tokenize response missing integer 'tokens' list: {_excerpt(body)}")
        return tokens

    def decode_tokens(self, endpoint: BackendEndpoint, tokens: list[int]) -> str:
        if not tokens:
            raise EmptyInputError("cannot decode an empty token list")
        body = self._post(endpoint, ROUTE_TOKENIZE, {"model": endpoint.model_name, "tokens": list(tokens)})
        text = body.get("text")
        if not isinstance(text, str):
            raise ProtocolError(f"tokenize decode response missing 'text' field: {_excerpt(body)}")
        return text

    def embed(self, endpoint: BackendEndpoint, payload: str | np.ndarray) -> Embedding:
        """Embed text or an image; always returns a unit vector.

        Text payloads are tokenized first and rejected when they exceed
        EMBED_TOKEN_LIMIT content tokens, since silently truncated embeddings
        would corrupt chunked scoring.
        """
        if isinstance(payload, str):
            if not payload:
                raise EmptyInputError("cannot embed empty text")
            n_tokens = len(self.tokenize(endpoint, payload))
            if n_tokens > EMBED_TOKEN_LIMIT:
                raise OverLengthTextError(
                    f"text tokenizes to {n_tokens} tokens, over the {EMBED_TOKEN_LIMIT}-token "
                    f"embed limit; callers must pre-chunk"
                )
            request = {"model": endpoint.model_name, "text": payload}
        else:
            if payload.size == 0:
                raise EmptyInputError("cannot embed an empty image")
            request = {"model": endpoint.model_name, "image": encode_image(payload)}
        body = self._post(endpoint, ROUTE_EMBED, request)
        raw = body.get("embedding")
        if not isinstance(raw, list) or not raw:
            raise ProtocolError(f"embed response missing 'embedding' list: {_excerpt(body)}")
        vector = np.asarray(raw, dtype=np.float64)
        if not np.all(np.isfinite(vector)):
            raise ContractViolationError("backend returned a non-finite embedding")
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise ContractViolationError("backend returned a zero embedding; cannot normalize")
        vector = vector / norm
        dim = int(vector.shape[0])
        key = (endpoint.base_url, endpoint.model_name)
        with self._lock:
            known = self._embed_dims.setdefault(key, dim)
        if known != dim:
            raise ContractViolationError(
                f"embedding dim changed from {known} to {dim} for {endpoint.model_name} "
                f"at {endpoint.base_url}"
            )
        return Embedding(vector=tuple(float(v) for v in vector), dim=dim, model_name=endpoint.model_name)

    def upscale(self, endpoint: BackendEndpoint, image: np.ndarray, factor: int) -> np.ndarray:
        if factor != SUPPORTED_UPSCALE_FACTOR:
            raise UnsupportedFactorError(
                f"upscale factor {factor} unsupported; only {SUPPORTED_UPSCALE_FACTOR} is available"
            )
        body = self._post(endpoint, ROUTE_UPSCALE, {"image": encode_image(image), "factor": factor})
        data = body.get("image")
        if not isinstance(data, str):
            raise ProtocolError(f"upscale response missing 'image' field: {_excerpt(body)}")
        out = decode_image(data)
        expected = (image.shape[0] * factor, image.shape[1] * factor, 3)
        if out.shape != expected:
            raise ContractViolationError(f"upscale returned shape {out.shape}, expected {expected}")
        return out

    def detect(self, endpoint: BackendEndpoint, image: np.ndarray) -> list[Detection]:
        """Detect buildings; non-building classes are filtered out here.

        Output is sorted by descending confidence (stable for ties). Boxes are
        clamped to the queried image's bounds; anything degenerate after
        clamping is a protocol error.
        """
        body = self._post(endpoint, ROUTE_DETECT, {"image": encode_image(image)})
        raw = body.get("detections")
        if not isinstance(raw, list):
            raise ProtocolError(f"detect response missing 'detections' list: {_excerpt(body)}")
        dims = ImageDims(image.shape[1], image.shape[0])
        detections: list[Detection] = []
        for i, entry in enumerate(raw):
            try:
                box = entry["box"]
                confidence = float(entry["confidence"])
                class_name = str(entry["class"])
                x_min, y_min, x_max, y_max = (float(v) for v in box)
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"malformed detection entry {i}: {entry!r}") from exc
            if class_name != "building":
                continue
            if not (0.0 <= confidence <= 1.0):
                raise ProtocolError(f"detection {i} confidence {confidence} outside [0, 1]")
            clamped = (
                min(max(x_min, 0.0), float(dims.width)),
                min(max(y_min, 0.0), float(dims.height)),
                min(max(x_max, 0.0), float(dims.width)),
                min(max(y_max, 0.0), float(dims.height)),
            )
            if clamped != (x_min, y_min, x_max, y_max):
                logger.debug("clamped out-of-bounds detection %s to %s", box, clamped)
            if not (clamped[0] < clamped[2] and clamped[1] < clamped[3]):
                raise ProtocolError(f"detection {i} box {box} is degenerate within {dims.width}x{dims.height}")
            detections.append(Detection(BBox(*clamped), confidence, class_name))
        detections.sort(key=lambda d: -d.confidence)
        return detections

    def _post(self, endpoint: BackendEndpoint, route: str, payload: dict) -> dict:
        attempts = endpoint.max_retries + 1
        for attempt in range(attempts):
            try:
                body = self._transport.post(endpoint, route, payload)
            except TransportFailure as exc:
                if attempt + 1 >= attempts:
                    raise BackendUnavailableError(
                        f"{route} via {endpoint.base_url} failed after {attempts} attempts: {exc}"
                    ) from exc
                delay = self._backoff_s * (2**attempt)
                logger.warning("%s attempt %d/%d failed (%s); retrying in %.1fs",
                               route, attempt + 1, attempts, exc, delay)
                if delay > 0:
                    time.sleep(delay)
                continue
            with self._lock:
                self._calls[route] += 1
            return body
        raise AssertionError("unreachable")


def _excerpt(body: dict) -> str:
    return repr(body)[:200]
