"""Shared test helpers: dataset builders and a completed mock run."""

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from damagepipe.assess import AssessOptions, RunManifest, run_event
from damagepipe.gateway import BackendEndpoint, Gateway
from damagepipe.mock_backend import MockBackend, MockTransport
from damagepipe.synthetic import generate_dataset
from damagepipe.xbd import ImagePairRecord, discover_pairs


def png_bytes(width: int = 8, height: int = 8, color: tuple = (120, 120, 120)) -> bytes:
    arr = np.full((height, width, 3), color, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: Path, width: int = 8, height: int = 8, color: tuple = (120, 120, 120)) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(width, height, color))
    return path


def write_label(path: Path, features: list, gsd: float | None = None) -> Path:
    payload = {"features": {"xy": features}, "metadata": {}}
    if gsd is not None:
        payload["metadata"]["gsd"] = gsd
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def square_feature(x0: float, y0: float, size: float, subtype: str | None = None, uid: str = "u1") -> dict:
    wkt = (
        f"POLYGON (({x0} {y0}, {x0 + size} {y0}, {x0 + size} {y0 + size}, "
        f"{x0} {y0 + size}, {x0} {y0}))"
    )
    props = {"feature_type": "building", "uid": uid}
    if subtype is not None:
        props["subtype"] = subtype
    return {"wkt": wkt, "properties": props}


CANDIDATES = ("gemma3:12b", "qwen3-vl:8b")
JURORS = ("gemma3:27b", "ministral-3:14b")


@dataclass
class MockRun:
    """A completed assessment pass over a synthetic dataset via the mock backend."""

    run_dir: Path
    dataset_dir: Path
    pairs: list[ImagePairRecord]
    gateway: Gateway
    backend: MockBackend
    endpoints: dict[str, BackendEndpoint]
    options: AssessOptions
    manifests: dict[str, RunManifest]
    candidates: tuple[str, ...] = CANDIDATES
    jurors: tuple[str, ...] = JURORS


def build_mock_run(root: Path, *, n_pairs: int = 2, buildings_per_pair: int = 2) -> MockRun:
    dataset_dir = root / "data"
    generate_dataset(dataset_dir, n_pairs=n_pairs, buildings_per_pair=buildings_per_pair,
                     dims=(96, 96), seed=11)
    pairs = discover_pairs(dataset_dir)
    backend = MockBackend(seed=3)
    gateway = Gateway(MockTransport(backend), backoff_s=0.0)
    base = BackendEndpoint(base_url="mock://local", model_name="", timeout_s=10.0, max_retries=1)
    endpoints = {
        "chat": base,
        "upscale": BackendEndpoint("mock://local", "sr-model", 10.0, 1),
        "detect": BackendEndpoint("mock://local", "detector", 10.0, 1),
        "clip": BackendEndpoint("mock://local", "clip-encoder", 10.0, 1),
    }
    options = AssessOptions(run_dir=root / "run", endpoints=endpoints, max_inflight=2)
    manifests = {
        candidate: run_event(options, pairs, gateway, candidate) for candidate in CANDIDATES
    }
    return MockRun(
        run_dir=Path(options.run_dir),
        dataset_dir=dataset_dir,
        pairs=pairs,
        gateway=gateway,
        backend=backend,
        endpoints=endpoints,
        options=options,
        manifests=manifests,
    )
