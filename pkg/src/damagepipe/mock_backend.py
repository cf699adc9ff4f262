"""Deterministic in-process backend implementing the gateway wire protocol.

Every response is a pure function of (canonical request bytes, seed), so any
pipeline run against the mock is reproducible byte for byte. Chat and detect
understand the marker-encoded synthetic imagery from :mod:`damagepipe.synthetic`;
embeddings are seeded unit vectors; the tokenizer is whitespace-based with
stable hashed ids and an in-process reverse map for decoding.

``MockTransport`` adapts a backend instance to the gateway's transport
interface and can inject transport failures to exercise retry behavior.
``create_mock_server`` exposes the same backend over real HTTP for protocol
conformance testing (the ``mock-serve`` CLI subcommand).
"""

from __future__ import annotations

import json
import logging
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .gateway import (
    ROUTE_CHAT,
    ROUTE_DETECT,
    ROUTE_EMBED,
    ROUTE_TOKENIZE,
    ROUTE_UPSCALE,
    BackendEndpoint,
    ProtocolError,
    TransportFailure,
    decode_image,
    encode_image,
)
from .prompts import JURY_PERSONA, REPAIR_INSTRUCTION
from .synthetic import extract_markers, find_marker_boxes
from .util import stable_hash, stable_unit

logger = logging.getLogger(__name__)

CHAT_MODE_NORMAL = "normal"
CHAT_MODE_GARBAGE_UNLESS_REPAIRED = "garbage-unless-repaired"

_GARBAGE_TEXT = (
    "The imagery is inconclusive and no structured output can be produced at this time."
)

_FILLER_WORDS = (
    "perimeter", "foundation", "facade", "courtyard", "annex", "rooftop",
    "gable", "veranda", "corridor", "basement", "chimney", "awning",
    "parapet", "balcony", "portico", "atrium",
)

_ASSESSMENT_CONTENT = {
    1: {
        "reasoning": "Roof and walls appear intact with no visible structural damage between captures.",
        "hazards": [],
        "characteristics": ["intact roof", "aligned walls"],
        "recommendations": ["routine inspection"],
    },
    2: {
        "reasoning": "Partial roof damage and scattered debris indicate moderate damage to the structure.",
        "hazards": ["falling debris"],
        "characteristics": ["partial roof damage", "scattered debris"],
        "recommendations": ["secure loose roofing", "limit access"],
    },
    3: {
        "reasoning": "Severe structural failure of load bearing walls with a large debris field.",
        "hazards": ["wall collapse", "unstable debris"],
        "characteristics": ["collapsed wall sections", "major debris field"],
        "recommendations": ["evacuate structure", "shore before entry"],
    },
    4: {
        "reasoning": "Total collapse of the building with complete structural failure across the footprint.",
        "hazards": ["total collapse", "void spaces"],
        "characteristics": ["flattened structure", "complete structural failure"],
        "recommendations": ["search and rescue sweep", "heavy equipment required"],
    },
}

_ACCURACY_NOTES = ("correct", "partially correct", "incorrect")


class MockBackend:
    """In-process implementation of all five capability routes."""

    def __init__(self, seed: int = 0, chat_mode: str = CHAT_MODE_NORMAL, embed_dim: int = 64) -> None:
        if chat_mode not in (CHAT_MODE_NORMAL, CHAT_MODE_GARBAGE_UNLESS_REPAIRED):
            raise ValueError(f"unknown chat_mode {chat_mode!r}")
        if embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {embed_dim}")
        self.seed = seed
        self.chat_mode = chat_mode
        self.embed_dim = embed_dim
        self._lock = threading.Lock()
        self._calls: Counter[str] = Counter()
        self._vocab: dict[int, str] = {}

    @property
    def calls(self) -> dict[str, int]:
        """Requests handled per route (thread-safe snapshot)."""
        with self._lock:
            return dict(self._calls)

    def handle(self, route: str, payload: dict) -> tuple[int, dict]:
        """Dispatch one request; returns (http_status, response_body)."""
        handlers = {
            ROUTE_CHAT: self._chat,
            ROUTE_TOKENIZE: self._tokenize,
            ROUTE_EMBED: self._embed,
            ROUTE_UPSCALE: self._upscale,
            ROUTE_DETECT: self._detect,
        }
        handler = handlers.get(route)
        if handler is None:
            return 404, {"error": f"unknown route {route}"}
        with self._lock:
            self._calls[route] += 1
        try:
            return handler(payload)
        except Exception as exc:  # malformed payloads become protocol-level errors
            logger.debug("mock %s error: %s", route, exc)
            return 400, {"error": str(exc)}

    # -- capability handlers -------------------------------------------------

    def _chat(self, payload: dict) -> tuple[int, dict]:
        prompt = payload.get("prompt")
        if not isinstance(prompt, str) or not prompt:
            return 400, {"error": "prompt must be a non-empty string"}
        repaired = REPAIR_INSTRUCTION in prompt
        if self.chat_mode == CHAT_MODE_GARBAGE_UNLESS_REPAIRED and not repaired:
            return 200, {"response": _GARBAGE_TEXT}
        if JURY_PERSONA in prompt:
            return 200, {"response": self._verdict_response(payload)}
        return 200, {"response": self._assessment_response(payload)}

    def _assessment_response(self, payload: dict) -> str:
        images = payload.get("images") or []
        category = 0
        if images:
            markers = extract_markers(decode_image(images[-1]))
            if markers:
                category = int(markers[0][len("[[CAT:") : -len("]]")])
        h = stable_hash(_canonical(payload), self.seed)
        if category not in _ASSESSMENT_CONTENT:
            category = h % 4 + 1
        content = _ASSESSMENT_CONTENT[category]
        w1 = _FILLER_WORDS[h % len(_FILLER_WORDS)]
        w2 = _FILLER_WORDS[(h // 16) % len(_FILLER_WORDS)]
        body = {
            "category": category,
            "reasoning": f"{content['reasoning']} Observed near the {w1} and the {w2}.",
            "hazards": content["hazards"],
            "characteristics": content["characteristics"],
            "recommendations": content["recommendations"],
        }
        return (
            "Assessment complete for the provided image pair.\n\n"
            "```json\n" + json.dumps(body, indent=2, sort_keys=True) + "\n```\n"
            "Stay safe out there."
        )

    def _verdict_response(self, payload: dict) -> str:
        data = _canonical(payload)
        score = round(stable_unit(data, self.seed) * 100.0, 2)
        h = stable_hash(data, self.seed + 1)
        body = {
            "score": score,
            "classification_accuracy": _ACCURACY_NOTES[h % len(_ACCURACY_NOTES)],
            "reasoning": f"The assessment aligns with the visible damage indicators near the "
                         f"{_FILLER_WORDS[h % len(_FILLER_WORDS)]}.",
        }
        return (
            "Grading the candidate assessment now.\n\n"
            "```json\n" + json.dumps(body, indent=2, sort_keys=True) + "\n```\n"
        )

    def _tokenize(self, payload: dict) -> tuple[int, dict]:
        if "tokens" in payload:
            ids = payload["tokens"]
            if not isinstance(ids, list) or not ids:
                return 400, {"error": "tokens must be a non-empty list"}
            words = []
            with self._lock:
                for token_id in ids:
                    word = self._vocab.get(token_id)
                    if word is None:
                        return 400, {"error": f"unknown token id {token_id}"}
                    words.append(word)
            return 200, {"text": " ".join(words)}
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            return 400, {"error": "text must be non-empty"}
        ids = []
        with self._lock:
            for word in text.split():
                token_id = stable_hash(word.encode("utf-8"), self.seed) % (1 << 31)
                self._vocab[token_id] = word
                ids.append(token_id)
        return 200, {"tokens": ids}

    def _embed(self, payload: dict) -> tuple[int, dict]:
        if "text" in payload:
            if not isinstance(payload["text"], str) or not payload["text"]:
                return 400, {"error": "text must be non-empty"}
        elif "image" in payload:
            decode_image(payload["image"])  # validates; raises on garbage
        else:
            return 400, {"error": "embed payload needs a text or image field"}
        rng = np.random.default_rng(stable_hash(_canonical(payload), self.seed))
        vector = rng.standard_normal(self.embed_dim)
        vector /= np.linalg.norm(vector)
        return 200, {"embedding": [float(v) for v in vector]}

    def _upscale(self, payload: dict) -> tuple[int, dict]:
        factor = payload.get("factor")
        if not isinstance(factor, int) or factor < 1:
            return 400, {"error": f"factor must be a positive integer, got {factor!r}"}
        image = decode_image(payload["image"])
        out = np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)
        return 200, {"image": encode_image(out)}

    def _detect(self, payload: dict) -> tuple[int, dict]:
        image = decode_image(payload["image"])
        height, width = image.shape[:2]
        detections = [
            {
                "box": list(box.bbox.as_tuple()),
                "confidence": box.confidence,
                "class": "building",
            }
            for box in find_marker_boxes(image)  # index order: deliberately not confidence-sorted
        ]
        if detections:
            detections.append(
                {
                    "box": [0.0, 0.0, float(min(8, width)), float(min(8, height))],
                    "confidence": 0.5,
                    "class": "vegetation",
                }
            )
        return 200, {"detections": detections}


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")


class MockTransport:
    """Gateway transport backed by an in-process MockBackend.

    ``fail_first`` maps a route to a number of initial requests that raise
    :class:`TransportFailure` instead of reaching the backend, for retry tests.
    ``attempts`` counts every post, including the injected failures.
    """

    def __init__(self, backend: MockBackend, fail_first: dict[str, int] | None = None) -> None:
        self._backend = backend
        self._fail_remaining = dict(fail_first or {})
        self._lock = threading.Lock()
        self.attempts: Counter[str] = Counter()

    def post(self, endpoint: BackendEndpoint, route: str, payload: dict) -> dict:
        with self._lock:
            self.attempts[route] += 1
            if self._fail_remaining.get(route, 0) > 0:
                self._fail_remaining[route] -= 1
                raise TransportFailure(f"injected failure on {route}")
        status, body = self._backend.handle(route, payload)
        if status >= 400:
            raise ProtocolError(f"POST mock{route} -> {status}: {body.get('error', '')[:200]}")
        return body


class _MockHandler(BaseHTTPRequestHandler):
    server_version = "damagepipe-mock/0.1"

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            if not isinstance(payload, dict):
                raise ValueError("body must be a JSON object")
        except (ValueError, UnicodeDecodeError) as exc:
            self._respond(400, {"error": f"bad request body: {exc}"})
            return
        status, body = self.server.backend.handle(self.path, payload)  # type: ignore[attr-defined]
        self._respond(status, body)

    def _respond(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args) -> None:  # noqa: A002
        logger.debug("mock-serve: " + format, *args)


def create_mock_server(backend: MockBackend, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bind an HTTP server exposing ``backend``; caller runs serve_forever()."""
    server = ThreadingHTTPServer((host, port), _MockHandler)
    server.backend = backend  # type: ignore[attr-defined]
    return server
