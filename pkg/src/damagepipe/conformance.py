"""Wire-protocol conformance checks runnable against any backend server.

The same suite validates the in-process mock served over HTTP and any real
serving shim, so a live deployment can be vetted with one command before a
long run. Checks use the production gateway for semantics (inheriting its
contract enforcement) and raw HTTP for error-shape assertions the gateway
would otherwise intercept client-side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import requests

from .gateway import ROUTE_EMBED, ROUTE_TOKENIZE, BackendEndpoint, Gateway, HttpTransport

DEFAULT_CAPABILITIES = ("tokenize", "embed")
_PINNED_TEXT = "a photo of a cat"
_PINNED_TOKEN_COUNT = 5
_CONTRAST_TEXT = "a diagram of a truck"


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one conformance check."""

    name: str
    passed: bool
    detail: str = ""


def _test_image(size: int = 16) -> np.ndarray:
    ramp = np.linspace(0, 255, size, dtype=np.uint8)
    image = np.zeros((size, size, 3), dtype=np.uint8)
    image[:, :, 0] = ramp
    image[:, :, 1] = ramp[:, None]
    image[:, :, 2] = 128
    return image


def run_conformance(
    base_url: str,
    capabilities: Sequence[str] = DEFAULT_CAPABILITIES,
    model_name: str = "clip-encoder",
    timeout_s: float = 30.0,
) -> list[CheckResult]:
    """Run every check the declared capabilities support; never raises."""
    gateway = Gateway(HttpTransport(), backoff_s=0.0)
    ep = BackendEndpoint(base_url=base_url, model_name=model_name, timeout_s=timeout_s, max_retries=0)
    checks: list[tuple[str, Callable[[], str]]] = []

    if "tokenize" in capabilities:
        checks += [
            ("tokenize: pinned phrase yields 5 ids", lambda: _check_pinned_tokens(gateway, ep)),
            ("tokenize: empty text is a 400 protocol error", lambda: _check_empty_tokenize(base_url, model_name, timeout_s)),
            ("tokenize: decode round-trip is a fixpoint", lambda: _check_decode_fixpoint(gateway, ep)),
        ]
    if "embed" in capabilities:
        checks += [
            ("embed: text embeddings are unit vectors", lambda: _check_unit_norm(gateway, ep)),
            ("embed: same text embeds identically", lambda: _check_same_text_cosine(gateway, ep)),
            ("embed: different texts embed differently", lambda: _check_different_text_cosine(gateway, ep)),
            ("embed: image embeddings share the text dim", lambda: _check_image_embed(gateway, ep)),
            ("embed: empty payload is a 400 protocol error", lambda: _check_empty_embed(base_url, model_name, timeout_s)),
        ]
    if "upscale" in capabilities:
        checks.append(("upscale: factor 4 quadruples dimensions", lambda: _check_upscale(gateway, ep)))
    if "detect" in capabilities:
        checks.append(("detect: blank image yields no detections", lambda: _check_detect_blank(gateway, ep)))

    results = []
    for name, check in checks:
        try:
            results.append(CheckResult(name=name, passed=True, detail=check()))
        except Exception as exc:
            results.append(CheckResult(name=name, passed=False, detail=f"{type(exc).__name__}: {exc}"))
    return results


def summarize(results: Sequence[CheckResult]) -> str:
    lines = [f"[{'PASS' if r.passed else 'FAIL'}] {r.name}" + (f" — {r.detail}" if r.detail else "") for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)


def _check_pinned_tokens(gateway: Gateway, ep: BackendEndpoint) -> str:
    ids = gateway.tokenize(ep, _PINNED_TEXT)
    if len(ids) != _PINNED_TOKEN_COUNT:
        raise AssertionError(f"expected {_PINNED_TOKEN_COUNT} ids, got {len(ids)}")
    return f"{len(ids)} ids"


def _check_empty_tokenize(base_url: str, model_name: str, timeout_s: float) -> str:
    return _expect_error_shape(
        f"{base_url.rstrip('/')}{ROUTE_TOKENIZE}", {"model": model_name, "text": ""}, timeout_s
    )


def _check_empty_embed(base_url: str, model_name: str, timeout_s: float) -> str:
    return _expect_error_shape(
        f"{base_url.rstrip('/')}{ROUTE_EMBED}", {"model": model_name, "text": ""}, timeout_s
    )


def _expect_error_shape(url: str, payload: dict, timeout_s: float) -> str:
    response = requests.post(url, json=payload, timeout=timeout_s)
    if 200 <= response.status_code < 300:
        raise AssertionError(f"expected a non-2xx status, got {response.status_code}")
    body = response.json()
    if not isinstance(body.get("error"), str) or not body["error"]:
        raise AssertionError(f"error body must carry a non-empty 'error' string, got {body!r}")
    return f"status {response.status_code}"


def _check_decode_fixpoint(gateway: Gateway, ep: BackendEndpoint) -> str:
    first = gateway.tokenize(ep, _PINNED_TEXT)
    text = gateway.decode_tokens(ep, first)
    second = gateway.tokenize(ep, text)
    if second != first:
        raise AssertionError(f"re-tokenizing decoded text changed ids: {first} -> {second}")
    return f"fixpoint over {len(first)} ids"


def _check_unit_norm(gateway: Gateway, ep: BackendEndpoint) -> str:
    embedding = gateway.embed(ep, _PINNED_TEXT)
    norm = math.sqrt(sum(v * v for v in embedding.vector))
    if abs(norm - 1.0) > 1e-5:
        raise AssertionError(f"norm {norm} deviates from 1 by more than 1e-5")
    return f"dim {embedding.dim}, norm {norm:.8f}"


def _check_same_text_cosine(gateway: Gateway, ep: BackendEndpoint) -> str:
    a = gateway.embed(ep, _PINNED_TEXT)
    b = gateway.embed(ep, _PINNED_TEXT)
    cosine = float(np.dot(a.vector, b.vector))
    if abs(cosine - 1.0) > 1e-6:
        raise AssertionError(f"same-text cosine {cosine} deviates from 1 by more than 1e-6")
    return f"cosine {cosine:.9f}"


def _check_different_text_cosine(gateway: Gateway, ep: BackendEndpoint) -> str:
    a = gateway.embed(ep, _PINNED_TEXT)
    b = gateway.embed(ep, _CONTRAST_TEXT)
    cosine = float(np.dot(a.vector, b.vector))
    if not cosine < 1.0 - 1e-6:
        raise AssertionError(f"different texts should not embed identically (cosine {cosine})")
    return f"cosine {cosine:.6f}"


def _check_image_embed(gateway: Gateway, ep: BackendEndpoint) -> str:
    text_dim = gateway.embed(ep, _PINNED_TEXT).dim
    image_emb = gateway.embed(ep, _test_image())
    if image_emb.dim != text_dim:
        raise AssertionError(f"image dim {image_emb.dim} != text dim {text_dim}")
    return f"dim {image_emb.dim}"


def _check_upscale(gateway: Gateway, ep: BackendEndpoint) -> str:
    image = _test_image(16)
    out = gateway.upscale(ep, image, 4)
    if out.shape[:2] != (64, 64):
        raise AssertionError(f"expected 64x64 output, got {out.shape[:2]}")
    return "16x16 -> 64x64"


def _check_detect_blank(gateway: Gateway, ep: BackendEndpoint) -> str:
    blank = np.zeros((32, 32, 3), dtype=np.uint8)
    detections = gateway.detect(ep, blank)
    if detections:
        raise AssertionError(f"expected no detections on a blank image, got {len(detections)}")
    return "0 detections"
