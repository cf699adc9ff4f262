"""Dataset ingest: pre/post image pair discovery and building label parsing.

Consumes the xBD on-disk conventions:

- images named ``<event>_<id>_pre_disaster.<ext>`` / ``<event>_<id>_post_disaster.<ext>``
  sitting in the same directory; ``pair_id`` is ``<event>_<id>``;
- label JSON named like the image with a ``.json`` suffix, either next to the
  image or in a sibling ``labels/`` directory;
- label JSON subset: top-level ``features.xy[]`` entries carrying ``wkt`` plus
  ``properties.feature_type`` / ``properties.subtype`` / ``properties.uid``,
  and an optional top-level ``metadata.gsd``. Unknown keys are ignored.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

from PIL import Image

from .geometry import ImageDims, Polygon, parse_wkt_polygon

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
DEFAULT_GSD_M = 0.5

_PAIR_NAME_RE = re.compile(r"^(?P<pair_id>.+)_(?P<phase>pre|post)_disaster$")


class SubtypeMappingError(ValueError):
    """Raised for damage subtype strings outside the known xBD vocabulary."""


class LabelLoadError(ValueError):
    """Raised when a label file cannot be read or parsed."""


class PairConsistencyError(ValueError):
    """Raised when the two images of a pair disagree on dimensions."""


class DamageCategory(IntEnum):
    """Four-level building damage scale."""

    NO_SLIGHT = 1
    MODERATE = 2
    SEVERE = 3
    DESTROYED = 4

    @property
    def label(self) -> str:
        return _CATEGORY_LABELS[self]


_CATEGORY_LABELS = {
    DamageCategory.NO_SLIGHT: "No/Slight Damage",
    DamageCategory.MODERATE: "Moderate Damage",
    DamageCategory.SEVERE: "Severe Damage",
    DamageCategory.DESTROYED: "Totally Destroyed",
}

_SUBTYPE_MAP = {
    "no-damage": DamageCategory.NO_SLIGHT,
    "minor-damage": DamageCategory.MODERATE,
    "major-damage": DamageCategory.SEVERE,
    "destroyed": DamageCategory.DESTROYED,
}

UNCLASSIFIED_SUBTYPE = "un-classified"


@dataclass(frozen=True)
class BuildingAnnotation:
    """One building footprint, optionally with a ground-truth damage category.

    Pre-disaster labels carry no damage subtype, so ``category`` is None there
    rather than defaulting to "no damage".
    """

    uid: str
    polygon: Polygon
    category: DamageCategory | None = None


@dataclass(frozen=True)
class ImagePairRecord:
    """A discovered pre/post image pair plus optional label files."""

    pair_id: str
    pre_image_path: Path
    post_image_path: Path
    pre_labels_path: Path | None
    post_labels_path: Path | None
    dims: ImageDims
    gsd_m: float = DEFAULT_GSD_M


def subtype_to_category(subtype: str) -> DamageCategory | None:
    """Map an xBD damage subtype string to the four-level scale.

    Returns None for ``un-classified`` (the caller excludes and counts those).
    Any other unknown string raises :class:`SubtypeMappingError`.
    """
    if subtype == UNCLASSIFIED_SUBTYPE:
        return None
    try:
        return _SUBTYPE_MAP[subtype]
    except KeyError:
        raise SubtypeMappingError(
            f"unknown damage subtype {subtype!r}; expected one of "
            f"{sorted(_SUBTYPE_MAP)} or {UNCLASSIFIED_SUBTYPE!r}"
        ) from None


def load_label_file(path: Path, counters: dict[str, int] | None = None) -> list[BuildingAnnotation]:
    """Parse one xBD label JSON file into building annotations.

    Non-building feature types are skipped. Features with the ``un-classified``
    subtype are excluded from the result; when ``counters`` is given, the
    ``"unclassified_excluded"`` key is incremented per exclusion (and
    ``"non_building_skipped"`` for skipped feature types).

    Raises:
        LabelLoadError: unreadable file, invalid JSON, or invalid WKT; the
            message includes the index of the offending feature.
    """
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise LabelLoadError(f"cannot read label file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LabelLoadError(f"invalid JSON in label file {path}: {exc}") from exc

    features = payload.get("features", {}).get("xy", [])
    if not isinstance(features, list):
        raise LabelLoadError(f"features.xy is not a list in {path}")

    annotations: list[BuildingAnnotation] = []
    for index, feature in enumerate(features):
        props = feature.get("properties", {})
        feature_type = props.get("feature_type", "building")
        if feature_type != "building":
            _bump(counters, "non_building_skipped")
            continue
        try:
            polygon = parse_wkt_polygon(feature["wkt"])
        except KeyError:
            raise LabelLoadError(f"feature {index} in {path} has no wkt") from None
        except ValueError as exc:
            raise LabelLoadError(f"feature {index} in {path}: {exc}") from exc
        category: DamageCategory | None = None
        if "subtype" in props:
            try:
                category = subtype_to_category(props["subtype"])
            except SubtypeMappingError as exc:
                raise LabelLoadError(f"feature {index} in {path}: {exc}") from exc
            if category is None:
                _bump(counters, "unclassified_excluded")
                continue
        uid = str(props.get("uid", f"feature-{index}"))
        annotations.append(BuildingAnnotation(uid=uid, polygon=polygon, category=category))
    return annotations


def discover_pairs(root_dir: Path) -> list[ImagePairRecord]:
    """Walk ``root_dir`` recursively and pair up pre/post disaster images.

    Grouping happens per directory, so identically named events in different
    folders stay distinct. Images missing their counterpart are logged as
    orphan warnings and skipped. Results are sorted by pair_id and are
    independent of directory listing order.
    """
    root = Path(root_dir)
    found: dict[tuple[Path, str], dict[str, Path]] = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        m = _PAIR_NAME_RE.match(path.stem)
        if m is None:
            continue
        found.setdefault((path.parent, m.group("pair_id")), {})[m.group("phase")] = path

    records: list[ImagePairRecord] = []
    for (parent, pair_id), phases in sorted(found.items(), key=lambda kv: (kv[0][1], str(kv[0][0]))):
        if "pre" not in phases or "post" not in phases:
            present = next(iter(phases.values()))
            logger.warning("orphan image without %s counterpart: %s",
                           "post" if "pre" in phases else "pre", present)
            continue
        pre_path, post_path = phases["pre"], phases["post"]
        dims = _read_dims(pre_path)
        post_dims = _read_dims(post_path)
        if dims != post_dims:
            raise PairConsistencyError(
                f"pair {pair_id}: pre is {dims.width}x{dims.height} but post is "
                f"{post_dims.width}x{post_dims.height}"
            )
        pre_labels = _find_labels(pre_path)
        post_labels = _find_labels(post_path)
        records.append(
            ImagePairRecord(
                pair_id=pair_id,
                pre_image_path=pre_path,
                post_image_path=post_path,
                pre_labels_path=pre_labels,
                post_labels_path=post_labels,
                dims=dims,
                gsd_m=_read_gsd(post_labels),
            )
        )
    return records


def _read_dims(path: Path) -> ImageDims:
    with Image.open(path) as im:
        width, height = im.size
    return ImageDims(width, height)


def _find_labels(image_path: Path) -> Path | None:
    same_dir = image_path.with_suffix(".json")
    if same_dir.exists():
        return same_dir
    sibling = image_path.parent.parent / "labels" / (image_path.stem + ".json")
    if sibling.exists():
        return sibling
    return None


def _read_gsd(labels_path: Path | None) -> float:
    if labels_path is None:
        return DEFAULT_GSD_M
    try:
        payload = json.loads(labels_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return DEFAULT_GSD_M
    gsd = payload.get("metadata", {}).get("gsd")
    return float(gsd) if isinstance(gsd, (int, float)) else DEFAULT_GSD_M


def _bump(counters: dict[str, int] | None, key: str) -> None:
    if counters is not None:
        counters[key] = counters.get(key, 0) + 1
