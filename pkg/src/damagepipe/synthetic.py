"""Synthetic pre/post imagery with machine-readable building markers.

The deterministic mock backend needs images it can "understand" without any
model. Buildings are axis-aligned rectangles whose pixels encode everything:

- red channel == 200 marks building pixels (background is uniform gray 128),
- green channel == 10 * damage category on post images (0 on pre images),
- blue channel == per-image building index.

The encoding survives nearest-neighbor upscaling and cropping, so detection
and chat mocks behave consistently at any pipeline stage. Marker boxes use
integer corners, which keeps generated label polygons and detected boxes in
exact agreement.

Run ``python -m damagepipe.synthetic <out_dir>`` to materialize a small
dataset for demos.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BBox
from .util import save_image

MARKER_RED = 200
BACKGROUND_COLOR = (128, 128, 128)
CATEGORY_SUBTYPES = {1: "no-damage", 2: "minor-damage", 3: "major-damage", 4: "destroyed"}


@dataclass(frozen=True)
class MarkerBox:
    """A building rectangle recovered from marker pixels."""

    index: int
    category: int
    bbox: BBox
    confidence: float
    pixel_count: int


def marker_confidence(index: int) -> float:
    """Deterministic, non-monotonic per-building detection confidence."""
    return ((index * 37) % 60 + 35) / 100.0


def draw_pair(
    dims: tuple[int, int], buildings: list[tuple[int, int, int, int, int]]
) -> tuple[np.ndarray, np.ndarray]:
    """Render (pre, post) images for buildings given as (x0, y0, x1, y1, category)."""
    width, height = dims
    pre = np.full((height, width, 3), BACKGROUND_COLOR, dtype=np.uint8)
    post = pre.copy()
    for index, (x0, y0, x1, y1, category) in enumerate(buildings):
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ValueError(f"building {index} rectangle {(x0, y0, x1, y1)} outside {width}x{height}")
        if not 1 <= category <= 4:
            raise ValueError(f"building {index} category {category} outside 1-4")
        if index > 255:
            raise ValueError("at most 256 buildings per image")
        pre[y0:y1, x0:x1] = (MARKER_RED, 0, index)
        post[y0:y1, x0:x1] = (MARKER_RED, category * 10, index)
    return pre, post


def find_marker_boxes(image: np.ndarray) -> list[MarkerBox]:
    """Recover building rectangles from marker pixels, ordered by building index."""
    mask = image[:, :, 0] == MARKER_RED
    if not mask.any():
        return []
    boxes: list[MarkerBox] = []
    for index in np.unique(image[:, :, 2][mask]):
        sub = mask & (image[:, :, 2] == index)
        ys, xs = np.nonzero(sub)
        category = int(image[:, :, 1][sub][0]) // 10
        boxes.append(
            MarkerBox(
                index=int(index),
                category=category,
                bbox=BBox(float(xs.min()), float(ys.min()), float(xs.max()) + 1.0, float(ys.max()) + 1.0),
                confidence=marker_confidence(int(index)),
                pixel_count=int(sub.sum()),
            )
        )
    return boxes


def extract_markers(image: np.ndarray) -> list[str]:
    """Category markers like ``[[CAT:3]]``, most prominent building first."""
    boxes = sorted(find_marker_boxes(image), key=lambda b: (-b.pixel_count, b.index))
    return [f"[[CAT:{b.category}]]" for b in boxes]


def generate_dataset(
    root: Path,
    n_pairs: int = 3,
    buildings_per_pair: int = 2,
    dims: tuple[int, int] = (256, 256),
    seed: int = 7,
    event: str = "mock-event",
) -> list[str]:
    """Write a small marker-encoded dataset in the paired on-disk layout.

    Produces ``images/<pair>_{pre,post}_disaster.png`` plus pre (no subtype)
    and post (with subtype) label files under ``labels/``. Categories cycle
    through the four levels so both damage buckets are always represented.
    Returns the generated pair ids.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    width, height = dims
    cols = int(np.ceil(np.sqrt(buildings_per_pair)))
    rows = int(np.ceil(buildings_per_pair / cols))
    cell_w, cell_h = width // cols, height // rows
    if min(cell_w, cell_h) < 16:
        raise ValueError(f"{buildings_per_pair} buildings do not fit {width}x{height} with 16px cells")

    pair_ids: list[str] = []
    for i in range(n_pairs):
        pair_id = f"{event}_{i:08d}"
        buildings: list[tuple[int, int, int, int, int]] = []
        for b in range(buildings_per_pair):
            r, c = divmod(b, cols)
            w = int(rng.integers(int(cell_w * 0.35), int(cell_w * 0.55)) )
            h = int(rng.integers(int(cell_h * 0.35), int(cell_h * 0.55)) )
            x0 = c * cell_w + int(rng.integers(int(cell_w * 0.2), max(cell_w - w - int(cell_w * 0.2), int(cell_w * 0.2)) + 1))
            y0 = r * cell_h + int(rng.integers(int(cell_h * 0.2), max(cell_h - h - int(cell_h * 0.2), int(cell_h * 0.2)) + 1))
            category = (i + b) % 4 + 1
            buildings.append((x0, y0, x0 + w, y0 + h, category))
        pre, post = draw_pair(dims, buildings)
        save_image(root / "images" / f"{pair_id}_pre_disaster.png", pre)
        save_image(root / "images" / f"{pair_id}_post_disaster.png", post)
        _write_labels(root / "labels" / f"{pair_id}_pre_disaster.json", pair_id, buildings, with_subtype=False)
        _write_labels(root / "labels" / f"{pair_id}_post_disaster.json", pair_id, buildings, with_subtype=True)
        pair_ids.append(pair_id)
    return pair_ids


def _write_labels(path: Path, pair_id: str, buildings: list, with_subtype: bool) -> None:
    features = []
    for index, (x0, y0, x1, y1, category) in enumerate(buildings):
        wkt = f"POLYGON (({x0} {y0}, {x1} {y0}, {x1} {y1}, {x0} {y1}, {x0} {y0}))"
        properties = {"feature_type": "building", "uid": f"{pair_id}_b{index}"}
        if with_subtype:
            properties["subtype"] = CATEGORY_SUBTYPES[category]
        features.append({"wkt": wkt, "properties": properties})
    payload = {"features": {"xy": features}, "metadata": {"gsd": 0.5}}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def main(argv: list[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="Generate a marker-encoded synthetic dataset.")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--pairs", type=int, default=3)
    parser.add_argument("--buildings", type=int, default=2)
    parser.add_argument("--size", type=int, default=256, help="square image edge in pixels")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    pair_ids = generate_dataset(
        args.out_dir, n_pairs=args.pairs, buildings_per_pair=args.buildings,
        dims=(args.size, args.size), seed=args.seed,
    )
    print(f"wrote {len(pair_ids)} pairs under {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
