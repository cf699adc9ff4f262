"""Wire-protocol behavior of the running server."""

from concurrent.futures import ThreadPoolExecutor

import pytest
import requests

from shim_support import png_b64, post


class TestRouting:
    def test_unknown_route_is_404(self, base_url):
        resp = post(base_url, "/api/unknown", {})
        assert resp.status_code == 404
        assert "error" in resp.json()

    def test_chat_is_never_served(self, base_url):
        resp = post(base_url, "/api/chat", {"model": "m", "prompt": "p", "images": []})
        assert resp.status_code == 501
        assert resp.json() == {"error": "capability not configured"}

    def test_unconfigured_detect_is_501(self, base_url):
        resp = post(base_url, "/api/detect", {"image": png_b64()})
        assert resp.status_code == 501
        assert resp.json() == {"error": "capability not configured"}

    def test_malformed_body_is_400(self, base_url):
        resp = requests.post(
            base_url + "/api/tokenize",
            data=b"{not json",
            headers={"Content-Type": "application/json"},
            timeout=10,
        )
        assert resp.status_code == 400

    def test_non_object_body_is_400(self, base_url):
        resp = requests.post(base_url + "/api/tokenize", json=[1, 2], timeout=10)
        assert resp.status_code == 400


class TestTokenizeRoute:
    def test_text_to_tokens(self, base_url):
        resp = post(base_url, "/api/tokenize", {"model": "m", "text": "a photo of a cat"})
        assert resp.status_code == 200
        tokens = resp.json()["tokens"]
        assert len(tokens) == 5 and all(isinstance(t, int) for t in tokens)

    def test_tokens_to_text(self, base_url):
        tokens = post(base_url, "/api/tokenize", {"model": "m", "text": "severe damage"}).json()["tokens"]
        resp = post(base_url, "/api/tokenize", {"model": "m", "tokens": tokens})
        assert resp.status_code == 200
        assert resp.json()["text"] == "severe damage"

    @pytest.mark.parametrize(
        "payload",
        [
            {"model": "m", "text": ""},
            {"model": "m"},
            {"model": "m", "text": 7},
            {"model": "m", "tokens": []},
            {"model": "m", "tokens": ["x"]},
        ],
    )
    def test_bad_payloads_are_400_with_error_body(self, base_url, payload):
        resp = post(base_url, "/api/tokenize", payload)
        assert resp.status_code == 400
        assert isinstance(resp.json()["error"], str)


class TestEmbedRoute:
    def test_text_embedding_shape(self, base_url):
        resp = post(base_url, "/api/embed", {"model": "m", "text": "post-disaster scene"})
        assert resp.status_code == 200
        embedding = resp.json()["embedding"]
        assert len(embedding) == 512
        assert abs(sum(v * v for v in embedding) - 1.0) < 1e-9

    def test_image_embedding_shape(self, base_url):
        resp = post(base_url, "/api/embed", {"model": "m", "image": png_b64(seed=2)})
        assert resp.status_code == 200
        assert len(resp.json()["embedding"]) == 512

    def test_text_at_budget_accepted_over_budget_rejected(self, base_url, shim_server):
        budget = shim_server.encoder.max_content_tokens
        at_limit = " ".join(f"w{i}" for i in range(budget))
        over = " ".join(f"w{i}" for i in range(budget + 1))
        assert post(base_url, "/api/embed", {"model": "m", "text": at_limit}).status_code == 200
        resp = post(base_url, "/api/embed", {"model": "m", "text": over})
        assert resp.status_code == 400
        assert f"{budget}-token limit" in resp.json()["error"]

    @pytest.mark.parametrize(
        "payload",
        [
            {"model": "m"},
            {"model": "m", "text": ""},
            {"model": "m", "text": "x", "image": "aGk="},
            {"model": "m", "image": "not base64!!"},
            {"model": "m", "image": "aGVsbG8="},  # valid base64, not a PNG
        ],
    )
    def test_bad_payloads_are_400(self, base_url, payload):
        resp = post(base_url, "/api/embed", payload)
        assert resp.status_code == 400
        assert "error" in resp.json()

    def test_concurrent_same_text_requests_agree(self, base_url):
        def fetch(_):
            return tuple(post(base_url, "/api/embed", {"model": "m", "text": "hail damage"}).json()["embedding"])

        with ThreadPoolExecutor(max_workers=8) as pool:
            vectors = set(pool.map(fetch, range(16)))
        assert len(vectors) == 1


class TestUpscaleRoute:
    def test_factor_four_quadruples_dims(self, base_url):
        import base64
        import io

        from PIL import Image

        resp = post(base_url, "/api/upscale", {"image": png_b64(16, 16), "factor": 4})
        assert resp.status_code == 200
        with Image.open(io.BytesIO(base64.b64decode(resp.json()["image"]))) as im:
            assert im.size == (64, 64)

    @pytest.mark.parametrize("factor", [0, -1, 2.5, True, "4", None])
    def test_bad_factor_is_400(self, base_url, factor):
        resp = post(base_url, "/api/upscale", {"image": png_b64(), "factor": factor})
        assert resp.status_code == 400

    def test_bad_image_is_400(self, base_url):
        resp = post(base_url, "/api/upscale", {"image": "////", "factor": 4})
        assert resp.status_code == 400
