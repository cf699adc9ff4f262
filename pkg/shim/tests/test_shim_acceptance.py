"""Acceptance gate for the serving shim, driven through the primary client.

The protocol-conformance criterion runs against the checkpoint-free encoder;
the semantic-sanity criterion needs real weights and skips unless the
CLIP_SHIM_CHECKPOINT environment variable points at a resolvable checkpoint.
"""

import math
import os
import threading
import time

import numpy as np
import pytest
from PIL import Image, ImageDraw

from damagepipe.conformance import run_conformance, summarize
from damagepipe.gateway import BackendEndpoint, Gateway, HttpTransport

from clip_shim import ShimConfig, create_server


def test_primary_conformance_suite_passes_against_shim(base_url):
    start = time.perf_counter()
    results = run_conformance(base_url, capabilities=("tokenize", "embed"))
    elapsed = time.perf_counter() - start
    failures = [r for r in results if not r.passed]
    assert not failures, summarize(results)
    assert elapsed < 120.0, f"conformance took {elapsed:.1f}s"
    print(f"ACCEPTANCE PASS: shim conformance, {len(results)} checks in {elapsed:.2f}s")


def test_pinned_phrase_norms_and_self_cosine_through_gateway(base_url):
    gateway = Gateway(HttpTransport(), backoff_s=0.0)
    endpoint = BackendEndpoint(base_url=base_url, model_name="clip-encoder", timeout_s=30.0)

    tokens = gateway.tokenize(endpoint, "a photo of a cat")
    assert len(tokens) == 5

    first = gateway.embed(endpoint, "a photo of a cat")
    second = gateway.embed(endpoint, "a photo of a cat")
    norm = math.sqrt(math.fsum(v * v for v in first.vector))
    assert norm == pytest.approx(1.0, abs=1e-5)
    cosine = math.fsum(a * b for a, b in zip(first.vector, second.vector))
    assert cosine == pytest.approx(1.0, abs=1e-6)
    print("ACCEPTANCE PASS: 5 pinned ids; unit norms within 1e-5; same-text cosine within 1e-6")


def _scene(kind: str) -> np.ndarray:
    image = Image.new("RGB", (224, 224), "white")
    draw = ImageDraw.Draw(image)
    if kind == "red-square":
        draw.rectangle([56, 56, 168, 168], fill=(220, 20, 20))
    elif kind == "green-circle":
        draw.ellipse([56, 56, 168, 168], fill=(20, 160, 20))
    else:  # blue-stripes
        for y in range(0, 224, 32):
            draw.rectangle([0, y, 224, y + 16], fill=(20, 20, 200))
    return np.asarray(image, dtype=np.uint8)


@pytest.mark.skipif(
    not os.environ.get("CLIP_SHIM_CHECKPOINT"),
    reason="semantic sanity needs real weights; set CLIP_SHIM_CHECKPOINT to a ViT-B/32 checkpoint",
)
def test_semantic_sanity_with_real_checkpoint():
    config = ShimConfig(clip_model=os.environ["CLIP_SHIM_CHECKPOINT"])
    server = create_server(config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        host, port = server.server_address[:2]
        gateway = Gateway(HttpTransport(), backoff_s=0.0)
        endpoint = BackendEndpoint(base_url=f"http://{host}:{port}", model_name=server.encoder.name)
        cases = {
            "red-square": "a red square on a white background",
            "green-circle": "a green circle on a white background",
            "blue-stripes": "blue horizontal stripes on a white background",
        }
        image_vecs = {kind: gateway.embed(endpoint, _scene(kind)) for kind in cases}
        text_vecs = {kind: gateway.embed(endpoint, caption) for kind, caption in cases.items()}
        for kind, image_vec in image_vecs.items():
            matched = math.fsum(a * b for a, b in zip(image_vec.vector, text_vecs[kind].vector))
            for other, text_vec in text_vecs.items():
                if other == kind:
                    continue
                unmatched = math.fsum(a * b for a, b in zip(image_vec.vector, text_vec.vector))
                assert matched > unmatched, f"{kind}: caption {other!r} scored higher"
        print("ACCEPTANCE PASS: matched captions beat unmatched for all 3 pinned images")
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)
