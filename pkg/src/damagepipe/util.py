"""Small shared helpers: deterministic JSON artifacts, slugs, stable hashing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image


def write_json(path: Path, obj: Any) -> None:
    """Write ``obj`` as canonical JSON: sorted keys, 2-space indent, trailing newline.

    Every artifact in a run directory goes through this helper so repeated runs
    produce byte-identical files.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def slugify_model(name: str) -> str:
    """Turn a model name into a filesystem-safe directory name.

    ``qwen3-vl:32b`` becomes ``qwen3-vl_32b``. Distinct names that collide after
    slugging are the caller's problem; real model tags differ by more than
    punctuation.
    """
    out = []
    for ch in name:
        out.append(ch if ch.isalnum() or ch in "-._" else "_")
    return "".join(out)


def stable_hash(data: bytes, seed: int = 0) -> int:
    """Return a non-negative 63-bit integer hash that is stable across processes."""
    h = hashlib.blake2b(data, digest_size=8, key=seed.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "big") >> 1


def stable_unit(data: bytes, seed: int = 0) -> float:
    """Deterministically map bytes to a float in [0, 1)."""
    return stable_hash(data, seed) / float(1 << 63)


def load_image(path: Path) -> np.ndarray:
    """Load an image file as an RGB uint8 array of shape (height, width, 3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")
