"""Model backends the shim can serve: text/image encoders, upscalers, detectors.

Two encoder families share one interface:

- :class:`ClipEncoder` runs a real ViT-B/32 checkpoint (lazy torch/transformers
  import, resolved at startup, inference in eval mode under no_grad).
- :class:`HashedEncoder` is a checkpoint-free stand-in that derives unit
  vectors from content digests. It honors every wire and shape contract
  (determinism, unit norm, shared text/image dim, token round-trips) but has
  no semantic structure; use it for plumbing and protocol tests only.
"""

from __future__ import annotations

import hashlib
import threading

import numpy as np
from PIL import Image

from .config import DEFAULT_CLIP_MODEL, HASHED_ENCODER, ShimConfig

#: hub identifier used when the configured model is the bare family name
_DEFAULT_CHECKPOINT = "openai/clip-vit-base-patch32"


class BadRequestError(ValueError):
    """Client payload problem; surfaces as an HTTP 400 with an error body."""


class BackendResolutionError(RuntimeError):
    """A configured backend could not be loaded at startup."""


class HashedEncoder:
    """Content-addressed pseudo-embeddings with a whitespace tokenizer.

    Token ids are keyed digests of the lowercased words, so they are stable
    across processes; the id->word table for decoding is per-process. Text and
    image vectors come from seeding a PRNG with a payload digest, giving
    deterministic unit vectors of a shared dimension.
    """

    dim = 512
    #: whitespace tokens carry no begin/end sentinels, so the full budget
    #: of the downstream 77-token contract is available as content.
    max_content_tokens = 77

    def __init__(self) -> None:
        self.name = HASHED_ENCODER
        self._ids_to_words: dict[int, str] = {}
        self._vocab_lock = threading.Lock()

    @staticmethod
    def _digest(payload: bytes, purpose: bytes) -> bytes:
        return hashlib.blake2b(payload, digest_size=16, key=purpose).digest()

    def _vector_from(self, payload: bytes, purpose: bytes) -> np.ndarray:
        seed = int.from_bytes(self._digest(payload, purpose), "big")
        raw = np.random.Generator(np.random.PCG64(seed)).standard_normal(self.dim)
        return raw / np.linalg.norm(raw)

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().split()
        if not words:
            raise BadRequestError("text has no tokens")
        ids = []
        with self._vocab_lock:
            for word in words:
                token_id = int.from_bytes(self._digest(word.encode("utf-8"), b"shim-vocab")[:4], "big")
                self._ids_to_words[token_id] = word
                ids.append(token_id)
        return ids

    def decode(self, ids: list[int]) -> str:
        with self._vocab_lock:
            try:
                return " ".join(self._ids_to_words[token_id] for token_id in ids)
            except KeyError as exc:
                raise BadRequestError(f"unknown token id {exc.args[0]}") from exc

    def embed_text(self, text: str) -> np.ndarray:
        normalized = " ".join(text.lower().split())
        if not normalized:
            raise BadRequestError("text has no tokens")
        return self._vector_from(normalized.encode("utf-8"), b"shim-text")

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        payload = image.tobytes() + repr(image.shape).encode("ascii")
        return self._vector_from(payload, b"shim-image")


class ClipEncoder:
    """A pretrained dual encoder loaded from a checkpoint path or hub id."""

    def __init__(self, clip_model: str, device: str = "cpu") -> None:
        checkpoint = _DEFAULT_CHECKPOINT if clip_model == DEFAULT_CLIP_MODEL else clip_model
        try:
            import torch
            from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendResolutionError(
                f"clip model {clip_model!r} needs the optional [clip] dependencies: {exc}"
            ) from exc
        try:
            self._tokenizer = CLIPTokenizer.from_pretrained(checkpoint)
            self._processor = CLIPImageProcessor.from_pretrained(checkpoint)
            self._model = CLIPModel.from_pretrained(checkpoint).to(device).eval()
        except Exception as exc:  # hub/IO/validation failures are all startup fatal
            raise BackendResolutionError(f"cannot load checkpoint {checkpoint!r}: {exc}") from exc
        self._torch = torch
        self._device = device
        self.name = checkpoint
        self.dim = int(self._model.config.projection_dim)
        # two positions of the model's budget are begin/end sentinels
        self.max_content_tokens = int(self._tokenizer.model_max_length) - 2

    def tokenize(self, text: str) -> list[int]:
        ids = self._tokenizer(text, add_special_tokens=False)["input_ids"]
        if not ids:
            raise BadRequestError("text has no tokens")
        return [int(i) for i in ids]

    def decode(self, ids: list[int]) -> str:
        try:
            return self._tokenizer.decode(ids, skip_special_tokens=True).strip()
        except Exception as exc:
            raise BadRequestError(f"cannot decode token ids: {exc}") from exc

    def _normalized(self, features) -> np.ndarray:
        vector = features[0].detach().cpu().numpy().astype(np.float64)
        return vector / np.linalg.norm(vector)

    def embed_text(self, text: str) -> np.ndarray:
        n_tokens = len(self.tokenize(text))
        if n_tokens > self.max_content_tokens:
            raise BadRequestError(
                f"text tokenizes to {n_tokens} tokens, over the {self.max_content_tokens}-token limit"
            )
        inputs = self._tokenizer(text, return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            return self._normalized(self._model.get_text_features(**inputs))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        pil = Image.fromarray(image, mode="RGB")
        inputs = self._processor(images=pil, return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            return self._normalized(self._model.get_image_features(**inputs))


def build_encoder(config: ShimConfig):
    if config.clip_model == HASHED_ENCODER:
        return HashedEncoder()
    return ClipEncoder(config.clip_model, config.device)


_RESAMPLING = {"nearest": Image.NEAREST, "bicubic": Image.BICUBIC}


def build_upscaler(sr_backend: str):
    """Interpolation-based upscaler: (rgb array, factor) -> rgb array."""
    resample = _RESAMPLING[sr_backend]

    def upscale(image: np.ndarray, factor: int) -> np.ndarray:
        pil = Image.fromarray(image, mode="RGB")
        out = pil.resize((pil.width * factor, pil.height * factor), resample=resample)
        return np.asarray(out, dtype=np.uint8)

    return upscale


def build_detector(weights_path: str):
    """Load detector weights; returns (rgb array) -> list of detection dicts."""
    try:
        from ultralytics import YOLO
    except ImportError as exc:
        raise BackendResolutionError(
            f"detector backend needs the 'ultralytics' package: {exc}"
        ) from exc
    try:
        model = YOLO(weights_path)
    except Exception as exc:
        raise BackendResolutionError(f"cannot load detector weights {weights_path!r}: {exc}") from exc

    def detect(image: np.ndarray) -> list[dict]:
        entries = []
        for result in model.predict(image, verbose=False):
            for box in result.boxes:
                x_min, y_min, x_max, y_max = (float(v) for v in box.xyxy[0].tolist())
                entries.append(
                    {
                        "box": [x_min, y_min, x_max, y_max],
                        "confidence": float(box.conf[0]),
                        "class": str(result.names[int(box.cls[0])]),
                    }
                )
        return entries

    return detect
