"""Pixel-space geometry primitives: points, boxes, polygons, IoU, matching.

All coordinates are continuous pixels with the origin at the top-left corner,
x growing right and y growing down. Boxes are half-open in spirit (a box of
width 10 covers pixel columns x_min..x_max) but stored as plain floats; integer
snapping only happens when a box is used to slice an image.

WKT support is deliberately narrow. Accepted grammar::

    POLYGON ((x1 y1, x2 y2, ..., xn yn) [, (hole ring) ...])

- the POLYGON keyword is matched case-insensitively,
- only the first (outer) ring is used, hole rings are ignored,
- each vertex is exactly two numeric tokens separated by whitespace,
- a closing vertex equal to the first is dropped on parse and re-added on
  serialization, so parse -> serialize round-trips.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Sequence

logger = logging.getLogger(__name__)

_WKT_POLYGON_RE = re.compile(r"^\s*POLYGON\s*\((?P<body>.*)\)\s*$", re.IGNORECASE | re.DOTALL)


class WktParseError(ValueError):
    """Raised when a WKT polygon literal cannot be parsed."""


class DegenerateGeometryError(ValueError):
    """Raised when a shape collapses to zero width or height."""


@dataclass(frozen=True)
class PixelPoint:
    """A point in continuous pixel coordinates."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"point coordinates must be finite, got ({self.x}, {self.y})")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with strictly positive width and height."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"box must satisfy x_min < x_max and y_min < y_max, got "
                f"({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> PixelPoint:
        return PixelPoint((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Polygon:
    """A simple polygon stored as an unclosed outer ring of at least 3 vertices."""

    ring: tuple[PixelPoint, ...]

    def __post_init__(self) -> None:
        if len(self.ring) < 3:
            raise ValueError(f"polygon ring needs at least 3 vertices, got {len(self.ring)}")
        distinct = {(p.x, p.y) for p in self.ring}
        if len(distinct) < 3:
            raise ValueError(f"polygon ring needs at least 3 distinct vertices, got {len(distinct)}")


@dataclass(frozen=True)
class ImageDims:
    """Integer raster dimensions in pixels."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be >= 1, got {self.width}x{self.height}")


def parse_wkt_polygon(text: str) -> Polygon:
    """Parse a ``POLYGON ((...))`` literal into a :class:`Polygon`.

    Only the outer ring is kept. A closing vertex identical to the first is
    dropped. Raises :class:`WktParseError` for anything outside the grammar
    documented in the module docstring, naming the offending token.
    """
    m = _WKT_POLYGON_RE.match(text)
    if m is None:
        raise WktParseError(f"not a POLYGON ((...)) literal: {text[:80]!r}")
    body = m.group("body")
    outer = _first_ring(body, text)
    vertices: list[PixelPoint] = []
    for raw_vertex in outer.split(","):
        tokens = raw_vertex.split()
        if len(tokens) != 2:
            raise WktParseError(f"expected 'x y' vertex, got {raw_vertex.strip()!r}")
        coords = []
        for token in tokens:
            try:
                coords.append(float(token))
            except ValueError:
                raise WktParseError(f"non-numeric coordinate token {token!r}") from None
            if not math.isfinite(coords[-1]):
                raise WktParseError(f"non-finite coordinate token {token!r}")
        vertices.append(PixelPoint(coords[0], coords[1]))
    if len(vertices) >= 2 and vertices[0] == vertices[-1]:
        vertices.pop()
    distinct = {(p.x, p.y) for p in vertices}
    if len(distinct) < 3:
        raise WktParseError(
            f"polygon ring needs at least 3 distinct vertices, got {len(distinct)} in {text[:80]!r}"
        )
    return Polygon(tuple(vertices))


def _first_ring(body: str, original: str) -> str:
    """Extract the text of the first parenthesized ring from a POLYGON body."""
    start = body.find("(")
    if start < 0:
        raise WktParseError(f"POLYGON body has no ring: {original[:80]!r}")
    depth = 0
    for i in range(start, len(body)):
        if body[i] == "(":
            depth += 1
        elif body[i] == ")":
            depth -= 1
            if depth == 0:
                ring = body[start + 1 : i].strip()
                if not ring:
                    raise WktParseError(f"empty ring in {original[:80]!r}")
                return ring
    raise WktParseError(f"unbalanced parentheses in {original[:80]!r}")


def polygon_to_wkt(polygon: Polygon) -> str:
    """Serialize a polygon back to WKT, re-adding the closing vertex."""
    pts = list(polygon.ring) + [polygon.ring[0]]
    inner = ", ".join(f"{p.x!r} {p.y!r}" for p in pts)
    return f"POLYGON (({inner}))"


def polygon_to_bbox(polygon: Polygon) -> BBox:
    """Tight axis-aligned bounds of a polygon.

    Raises :class:`DegenerateGeometryError` if the vertices are collinear along
    an axis (zero-width or zero-height bounds).
    """
    xs = [p.x for p in polygon.ring]
    ys = [p.y for p in polygon.ring]
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_min == x_max or y_min == y_max:
        raise DegenerateGeometryError(
            f"polygon bounds are degenerate: width={x_max - x_min}, height={y_max - y_min}"
        )
    return BBox(x_min, y_min, x_max, y_max)


def full_image_bbox(dims: ImageDims) -> BBox:
    return BBox(0.0, 0.0, float(dims.width), float(dims.height))


def pad_bbox(box: BBox, pad_fraction: float, dims: ImageDims) -> BBox:
    """Expand ``box`` about its center by ``pad_fraction`` per dimension, then clamp.

    A ``pad_fraction`` of 0.30 grows width and height by 30% (15% per side).
    For a box far from the borders the padded area is (1 + pad_fraction)^2
    times the original; clamping to the image bounds can only shrink that.

    Args:
        box: the box to pad; must lie within ``dims``.
        pad_fraction: fractional growth per dimension, must be >= 0.
        dims: image bounds used for clamping.

    Returns:
        The padded, clamped box.
    """
    if not math.isfinite(pad_fraction) or pad_fraction < 0:
        raise ValueError(f"pad_fraction must be >= 0, got {pad_fraction}")
    if box.x_min < 0 or box.y_min < 0 or box.x_max > dims.width or box.y_max > dims.height:
        raise ValueError(f"box {box.as_tuple()} lies outside image bounds {dims.width}x{dims.height}")
    half_w = box.width * (1.0 + pad_fraction) / 2.0
    half_h = box.height * (1.0 + pad_fraction) / 2.0
    c = box.center
    return BBox(
        max(0.0, c.x - half_w),
        max(0.0, c.y - half_h),
        min(float(dims.width), c.x + half_w),
        min(float(dims.height), c.y + half_h),
    )


def scale_bbox(box: BBox, factor: float) -> BBox:
    """Multiply every coordinate by ``factor`` (must be finite and > 0)."""
    if not math.isfinite(factor) or factor <= 0:
        raise ValueError(f"scale factor must be > 0, got {factor}")
    return BBox(box.x_min * factor, box.y_min * factor, box.x_max * factor, box.y_max * factor)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def match_detections(
    detections: Sequence[tuple[BBox, float]],
    truths: Sequence[BBox],
    iou_threshold: float = 0.5,
) -> list[tuple[int, int]]:
    """Greedily match detections to ground-truth boxes, one-to-one.

    Detections are visited in order of descending confidence (ties broken by
    lower detection index). Each detection takes the not-yet-matched truth box
    with the highest IoU, provided that IoU is at or above ``iou_threshold``;
    IoU ties go to the lower truth index. Unmatched items on either side are
    simply absent from the result.

    Args:
        detections: (box, confidence) pairs.
        truths: ground-truth boxes.
        iou_threshold: minimum IoU to accept a match, in (0, 1].

    Returns:
        (detection_index, truth_index) pairs in the order matches were made.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    taken: set[int] = set()
    matches: list[tuple[int, int]] = []
    for det_idx in order:
        det_box = detections[det_idx][0]
        best_iou = 0.0
        best_truth = -1
        for t_idx, truth in enumerate(truths):
            if t_idx in taken:
                continue
            v = iou(det_box, truth)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_truth = t_idx
        if best_truth >= 0:
            taken.add(best_truth)
            matches.append((det_idx, best_truth))
    if len(matches) < len(detections):
        logger.debug("%d of %d detections left unmatched", len(detections) - len(matches), len(detections))
    return matches
