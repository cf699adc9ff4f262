"""Per-building damage assessment: upscale, detect, crop, query, parse.

The run loop per image pair: upscale pre and post (skippable for ablation),
detect buildings on the upscaled pre image only (post-disaster buildings may
be rubble), pad each detection box by the crop fraction, cut the same padded
rectangle from both images, and ask the candidate VLM to grade the damage.
Unparseable replies get exactly one repair re-prompt before being recorded as
failures; per-building failures never abort a run.

Run directory layout (model-independent artifacts are shared across candidates):

    <run_dir>/detections/<pair_id>.json
    <run_dir>/crops/<pair_id>/<index>_{pre,post}.png
    <run_dir>/assessments/<candidate>/<pair_id>/<index>.json
    <run_dir>/raw/<candidate>/<pair_id>/<index>.txt
    <run_dir>/manifest.json

Every artifact doubles as a resume checkpoint: work items whose files exist
are skipped, so re-running an up-to-date run issues zero backend calls.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .gateway import (
    BackendEndpoint,
    BackendUnavailableError,
    ChatRequest,
    Detection,
    Gateway,
    encode_image,
)
from .geometry import BBox, ImageDims, full_image_bbox, pad_bbox
from .prompts import DEFAULT_SCALE_DEFINITIONS, build_assessment_prompt, repair_prompt
from .util import load_image, read_json, save_image, slugify_model, write_json
from .xbd import DamageCategory, ImagePairRecord

logger = logging.getLogger(__name__)

GRANULARITY_CROPPED = "cropped"
GRANULARITY_FULL = "full"


class AssessmentParseError(ValueError):
    """Raised when a model reply contains no usable assessment JSON."""


@dataclass(frozen=True, eq=False)
class CropPair:
    """Aligned pre/post patches for one detected building."""

    pair_id: str
    building_index: int
    padded_box: BBox
    pre_patch: np.ndarray
    post_patch: np.ndarray
    detection_confidence: float

    def __post_init__(self) -> None:
        expected = (
            math.ceil(self.padded_box.y_max) - math.floor(self.padded_box.y_min),
            math.ceil(self.padded_box.x_max) - math.floor(self.padded_box.x_min),
        )
        for name, patch in (("pre_patch", self.pre_patch), ("post_patch", self.post_patch)):
            if patch.shape[:2] != expected:
                raise ValueError(f"{name} shape {patch.shape[:2]} does not match padded box dims {expected}")


@dataclass(frozen=True)
class DamageAssessment:
    """One parsed VLM damage assessment."""

    category: DamageCategory
    reasoning: str
    hazards: tuple[str, ...]
    characteristics: tuple[str, ...]
    recommendations: tuple[str, ...]
    raw_response: str
    candidate_model: str


@dataclass
class RunManifest:
    """Bookkeeping for one candidate's pass over a dataset."""

    run_id: str
    candidate_model: str
    config: dict
    timings: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    backend_calls: dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        counts = self.counts
        if any(v < 0 for v in counts.values()):
            raise ValueError(f"negative manifest count: {counts}")
        if counts.get("assessments", 0) + counts.get("failures", 0) != counts.get("crops", 0):
            raise ValueError(f"assessments + failures != crops in {counts}")
        if counts.get("crops", 0) != counts.get("detections", 0):
            raise ValueError(f"crops != detections in {counts}")


@dataclass(frozen=True)
class AssessOptions:
    """Everything run_event needs beyond the dataset and the gateway."""

    run_dir: Path
    endpoints: Mapping[str, BackendEndpoint]
    run_id: str = "run"
    sr_enabled: bool = True
    sr_factor: int = 4
    confidence_threshold: float = 0.25
    pad_fraction: float = 0.30
    granularity: str = GRANULARITY_CROPPED
    max_inflight: int = 4
    temperature: float = 0.0
    seed: int | None = 0
    config_snapshot: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.granularity not in (GRANULARITY_CROPPED, GRANULARITY_FULL):
            raise ValueError(f"granularity must be cropped or full, got {self.granularity!r}")
        if self.max_inflight < 1:
            raise ValueError(f"max_inflight must be >= 1, got {self.max_inflight}")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValueError(f"confidence_threshold must be in [0, 1], got {self.confidence_threshold}")


def crop_pair(
    pre_image: np.ndarray,
    post_image: np.ndarray,
    padded_box: BBox,
    *,
    pair_id: str = "",
    building_index: int = 0,
    detection_confidence: float = 0.0,
) -> CropPair:
    """Cut the same padded rectangle from both images with floor/ceil snapping.

    The extraction rectangle spans floor(x_min)..ceil(x_max) horizontally and
    floor(y_min)..ceil(y_max) vertically, so a box of (10.2, 10.2, 20.8, 20.8)
    yields an 11x11 patch anchored at (10, 10).
    """
    if pre_image.shape != post_image.shape:
        raise ValueError(f"pre {pre_image.shape} and post {post_image.shape} images differ in shape")
    height, width = pre_image.shape[:2]
    x0, y0 = math.floor(padded_box.x_min), math.floor(padded_box.y_min)
    x1, y1 = math.ceil(padded_box.x_max), math.ceil(padded_box.y_max)
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise ValueError(f"padded box {padded_box.as_tuple()} outside image {width}x{height}")
    return CropPair(
        pair_id=pair_id,
        building_index=building_index,
        padded_box=padded_box,
        pre_patch=pre_image[y0:y1, x0:x1].copy(),
        post_patch=post_image[y0:y1, x0:x1].copy(),
        detection_confidence=detection_confidence,
    )


def extract_first_json_object(text: str) -> dict:
    """Return the first decodable JSON object embedded anywhere in ``text``.

    Models routinely wrap JSON in prose or fenced code blocks; scanning for
    the first balanced, parseable object handles all of those shapes.
    """
    decoder = json.JSONDecoder()
    for start in range(len(text)):
        if text[start] != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise AssessmentParseError("no JSON object found in model response")


def parse_assessment(vlm_text: str, candidate_model: str) -> DamageAssessment:
    """Parse a model reply into a structured assessment.

    The category must be an integer 1-4 (numeric strings accepted); the list
    fields default to empty when absent; the raw reply is preserved verbatim.
    """
    obj = extract_first_json_object(vlm_text)
    category = _coerce_category(obj.get("category"))
    reasoning = obj.get("reasoning", "")
    if not isinstance(reasoning, str):
        reasoning = str(reasoning)
    return DamageAssessment(
        category=DamageCategory(category),
        reasoning=reasoning,
        hazards=_coerce_str_list(obj, "hazards"),
        characteristics=_coerce_str_list(obj, "characteristics"),
        recommendations=_coerce_str_list(obj, "recommendations"),
        raw_response=vlm_text,
        candidate_model=candidate_model,
    )


def _coerce_category(value) -> int:
    if isinstance(value, bool) or value is None:
        raise AssessmentParseError(f"category missing or invalid: {value!r}")
    if isinstance(value, int):
        category = value
    elif isinstance(value, float) and value.is_integer():
        category = int(value)
    elif isinstance(value, str) and value.strip().isdigit():
        category = int(value.strip())
    else:
        raise AssessmentParseError(f"category is not an integer: {value!r}")
    if category not in (1, 2, 3, 4):
        raise AssessmentParseError(f"category {category} outside the 1-4 scale")
    return category


def _coerce_str_list(obj: Mapping, key: str) -> tuple[str, ...]:
    value = obj.get(key, [])
    if not isinstance(value, list):
        raise AssessmentParseError(f"{key} must be a list, got {type(value).__name__}")
    return tuple(str(item) for item in value)


def assessment_caption(record: Mapping) -> str:
    """The caption scored by CLIP: category name + reasoning + hazards + recommendations."""
    category = DamageCategory(int(record["category"]))
    parts = [category.label, str(record.get("reasoning", ""))]
    parts.extend(str(h) for h in record.get("hazards", []))
    parts.extend(str(r) for r in record.get("recommendations", []))
    return " ".join(p.strip() for p in parts if p and p.strip())


def assessment_summary_text(record: Mapping) -> str:
    """Plain-text rendering of an assessment, used inside jury prompts."""
    category = DamageCategory(int(record["category"]))
    lines = [
        f"Damage category: ({category.value}) {category.label}",
        f"Reasoning: {record.get('reasoning', '')}",
        f"Hazards: {'; '.join(record.get('hazards', [])) or 'none listed'}",
        f"Characteristics: {'; '.join(record.get('characteristics', [])) or 'none listed'}",
        f"Recommendations: {'; '.join(record.get('recommendations', [])) or 'none listed'}",
    ]
    return "\n".join(lines)


def query_with_repair(
    gateway: Gateway,
    endpoint: BackendEndpoint,
    request: ChatRequest,
    parser: Callable[[str], object],
) -> tuple[object | None, str, bool, str | None]:
    """Chat once, parse; on parse failure re-prompt once with a repair instruction.

    Returns (parsed_or_None, final_raw_text, repair_used, error_message).
    """
    raw = gateway.chat(endpoint, request)
    try:
        return parser(raw), raw, False, None
    except ValueError as first_error:
        logger.debug("parse failed (%s); sending repair prompt", first_error)
    repaired = replace(request, prompt=repair_prompt(request.prompt, raw))
    raw = gateway.chat(endpoint, repaired)
    try:
        return parser(raw), raw, True, None
    except ValueError as second_error:
        return None, raw, True, str(second_error)


def iter_assessment_files(run_dir: Path, candidate_model: str) -> Iterator[tuple[str, int, Path]]:
    """Yield (pair_id, building_index, path) for a candidate, sorted."""
    base = Path(run_dir) / "assessments" / slugify_model(candidate_model)
    if not base.is_dir():
        return
    for pair_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        for path in sorted(pair_dir.glob("*.json"), key=lambda p: int(p.stem)):
            yield pair_dir.name, int(path.stem), path


def read_assessment(path: Path) -> dict:
    return read_json(path)


def run_event(
    options: AssessOptions,
    pairs: Sequence[ImagePairRecord],
    gateway: Gateway,
    candidate_model: str,
) -> RunManifest:
    """Assess every detected building in ``pairs`` with one candidate model.

    Backend-unavailable errors abort the run (everything persisted so far is a
    valid resume checkpoint); anything else is recorded per building. Chat
    queries run concurrently up to ``options.max_inflight``.
    """
    run_dir = Path(options.run_dir)
    slug = slugify_model(candidate_model)
    factor = options.sr_factor if options.sr_enabled else 1
    counts: Counter[str] = Counter()
    timings: Counter[str] = Counter()
    calls_before = gateway.call_counts
    prompt = build_assessment_prompt(DEFAULT_SCALE_DEFINITIONS)
    chat_ep = options.endpoints["chat"]

    work: list[dict] = []
    for pair in pairs:
        counts["pairs"] += 1
        lazy = _LazyUpscaledPair(pair, options, gateway, timings, factor)
        detections, dims_up = _ensure_detections(pair, options, gateway, timings, factor, lazy)
        for index, detection in enumerate(detections):
            counts["detections"] += 1
            padded = pad_bbox(detection.bbox, options.pad_fraction, dims_up)
            crop_pre_path = run_dir / "crops" / pair.pair_id / f"{index}_pre.png"
            crop_post_path = run_dir / "crops" / pair.pair_id / f"{index}_post.png"
            if not (crop_pre_path.exists() and crop_post_path.exists()):
                upscaled = lazy.get()
                crop = crop_pair(
                    upscaled[0],
                    upscaled[1],
                    padded,
                    pair_id=pair.pair_id,
                    building_index=index,
                    detection_confidence=detection.confidence,
                )
                save_image(crop_pre_path, crop.pre_patch)
                save_image(crop_post_path, crop.post_patch)
            counts["crops"] += 1
            assessment_path = run_dir / "assessments" / slug / pair.pair_id / f"{index}.json"
            if assessment_path.exists():
                record = read_json(assessment_path)
                counts["failures" if record.get("failed") else "assessments"] += 1
                counts["repair_retries"] += 1 if record.get("repair_used") else 0
                continue
            work.append(
                {
                    "pair_id": pair.pair_id,
                    "index": index,
                    "padded_box": padded,
                    "confidence": detection.confidence,
                    "crop_pre": crop_pre_path,
                    "crop_post": crop_post_path,
                    "out_json": assessment_path,
                    "out_raw": run_dir / "raw" / slug / pair.pair_id / f"{index}.txt",
                }
            )

    assess_started = time.perf_counter()
    if work:
        with ThreadPoolExecutor(max_workers=options.max_inflight) as pool:
            results = list(
                pool.map(
                    lambda item: _assess_building(item, options, gateway, chat_ep, prompt, candidate_model),
                    work,
                )
            )
        for outcome in results:
            counts[outcome] += 1
        for item in work:
            if read_json(item["out_json"]).get("repair_used"):
                counts["repair_retries"] += 1
    timings["assess_s"] += time.perf_counter() - assess_started

    calls_after = gateway.call_counts
    manifest = RunManifest(
        run_id=options.run_id,
        candidate_model=candidate_model,
        config=dict(options.config_snapshot),
        timings={k: round(v, 6) for k, v in sorted(timings.items())},
        counts={
            "pairs": counts["pairs"],
            "detections": counts["detections"],
            "crops": counts["crops"],
            "assessments": counts["assessments"],
            "failures": counts["failures"],
            "repair_retries": counts["repair_retries"],
        },
        backend_calls={
            route: calls_after.get(route, 0) - calls_before.get(route, 0)
            for route in sorted(calls_after)
            if calls_after.get(route, 0) - calls_before.get(route, 0) > 0
        },
    )
    manifest.validate()
    return manifest


class _LazyUpscaledPair:
    """Loads and upscales one pair's images at most once per run_event pass."""

    def __init__(self, pair: ImagePairRecord, options: AssessOptions, gateway: Gateway,
                 timings: Counter, factor: int) -> None:
        self._args = (pair, options, gateway, timings, factor)
        self._cached: tuple[np.ndarray, np.ndarray] | None = None

    def get(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cached is None:
            pair, options, gateway, timings, factor = self._args
            pre = load_image(pair.pre_image_path)
            post = load_image(pair.post_image_path)
            if factor == 1:
                self._cached = (pre, post)
            else:
                started = time.perf_counter()
                ep = options.endpoints["upscale"]
                self._cached = (gateway.upscale(ep, pre, factor), gateway.upscale(ep, post, factor))
                timings["upscale_s"] += time.perf_counter() - started
        return self._cached


def _ensure_detections(
    pair: ImagePairRecord,
    options: AssessOptions,
    gateway: Gateway,
    timings: Counter,
    factor: int,
    lazy: _LazyUpscaledPair,
) -> tuple[list[Detection], ImageDims]:
    """Load persisted detections for a pair, or compute and persist them."""
    path = Path(options.run_dir) / "detections" / f"{pair.pair_id}.json"
    dims_up = ImageDims(pair.dims.width * factor, pair.dims.height * factor)
    if path.exists():
        stored = read_json(path)
        detections = [
            Detection(BBox(*entry["box"]), float(entry["confidence"]), "building")
            for entry in stored["detections"]
        ]
        return detections, ImageDims(*stored["image_dims"])

    if options.granularity == GRANULARITY_FULL:
        detections = [Detection(full_image_bbox(dims_up), 1.0, "building")]
    else:
        upscaled_pre, _ = lazy.get()
        started = time.perf_counter()
        raw = gateway.detect(options.endpoints["detect"], upscaled_pre)
        timings["detect_s"] += time.perf_counter() - started
        detections = [d for d in raw if d.confidence >= options.confidence_threshold]
    write_json(
        path,
        {
            "pair_id": pair.pair_id,
            "image_dims": [dims_up.width, dims_up.height],
            "scale_factor": factor,
            "confidence_threshold": options.confidence_threshold,
            "granularity": options.granularity,
            "detections": [
                {"box": list(d.bbox.as_tuple()), "confidence": d.confidence} for d in detections
            ],
        },
    )
    return detections, dims_up


def _assess_building(
    item: dict,
    options: AssessOptions,
    gateway: Gateway,
    chat_ep: BackendEndpoint,
    prompt: str,
    candidate_model: str,
) -> str:
    """Worker body: query the VLM for one building and persist the outcome."""
    pre_patch = load_image(item["crop_pre"])
    post_patch = load_image(item["crop_post"])
    request = ChatRequest(
        model_name=candidate_model,
        prompt=prompt,
        images=(encode_image(pre_patch), encode_image(post_patch)),
        temperature=options.temperature,
        seed=options.seed,
    )
    try:
        parsed, raw, repair_used, error = query_with_repair(
            gateway, chat_ep, request, lambda text: parse_assessment(text, candidate_model)
        )
    except BackendUnavailableError:
        raise
    except Exception as exc:  # per-building failures never abort the run
        parsed, raw, repair_used, error = None, "", False, f"{type(exc).__name__}: {exc}"

    item["out_raw"].parent.mkdir(parents=True, exist_ok=True)
    item["out_raw"].write_text(raw, encoding="utf-8")
    base = {
        "pair_id": item["pair_id"],
        "building_index": item["index"],
        "candidate_model": candidate_model,
        "detection_confidence": item["confidence"],
        "padded_box": list(item["padded_box"].as_tuple()),
        "repair_used": repair_used,
    }
    if parsed is None:
        write_json(item["out_json"], {**base, "failed": True, "error": error, "raw_response": raw})
        return "failures"
    assert isinstance(parsed, DamageAssessment)
    write_json(
        item["out_json"],
        {
            **base,
            "failed": False,
            "category": parsed.category.value,
            "reasoning": parsed.reasoning,
            "hazards": list(parsed.hazards),
            "characteristics": list(parsed.characteristics),
            "recommendations": list(parsed.recommendations),
            "raw_response": parsed.raw_response,
        },
    )
    return "assessments"
