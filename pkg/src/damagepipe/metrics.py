"""Ground-truth comparison: damage-bucket classification metrics and term counts.

Predicted categories are compared against annotation labels after regrouping
the four-level scale into two buckets — minor {1, 2} vs severe {3, 4} — which
sidesteps the extreme class imbalance of the underlying data. Detections are
matched to ground-truth footprints by IoU; unmatched detections, failed
assessments, and unclassified footprints are counted separately rather than
folded into the confusion matrix.

Undefined metrics (zero denominators) are reported as ``None``, never as 0:
a recall of 0 means every severe building was missed, while an undefined
recall means there were no severe buildings to find.
"""

from __future__ import annotations

import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .assess import iter_assessment_files
from .geometry import BBox, match_detections, polygon_to_bbox, scale_bbox
from .util import read_json, slugify_model, write_json
from .xbd import BuildingAnnotation, DamageCategory, ImagePairRecord, load_label_file

logger = logging.getLogger(__name__)

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)?")
_F1_CONSISTENCY_TOL = 1e-9


class Bucket(Enum):
    """Binary regrouping of the four-level damage scale."""

    MINOR = "minor"
    SEVERE = "severe"


def to_bucket(category: DamageCategory | int) -> Bucket:
    """Categories 1-2 are minor, 3-4 severe."""
    return Bucket.MINOR if DamageCategory(category) <= DamageCategory.MODERATE else Bucket.SEVERE


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion-matrix counts; the positive class is configurable upstream."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; requires precision + recall > 0."""
    if precision + recall <= 0.0:
        raise ValueError("f1 undefined when precision + recall is 0")
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ClassificationReport:
    """Bucket-level metrics for one candidate; ``None`` marks undefined values."""

    candidate_model: str
    positive_class: Bucket
    counts: ConfusionCounts
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    def __post_init__(self) -> None:
        if self.precision is not None and self.recall is not None and self.precision + self.recall > 0:
            expected = f1_score(self.precision, self.recall)
            if self.f1 is None or abs(self.f1 - expected) > _F1_CONSISTENCY_TOL:
                raise ValueError(f"f1 {self.f1} inconsistent with precision/recall (expected {expected})")
        elif self.f1 is not None:
            raise ValueError("f1 must be None when precision/recall do not define it")

    def as_dict(self) -> dict:
        return {
            "candidate_model": self.candidate_model,
            "positive_class": self.positive_class.value,
            "counts": {"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn, "tn": self.counts.tn},
            "n_matched": self.counts.total,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def classification_metrics(
    pred_buckets: Sequence[Bucket],
    truth_buckets: Sequence[Bucket],
    *,
    candidate_model: str = "",
    positive: Bucket = Bucket.SEVERE,
) -> ClassificationReport:
    """Confusion-matrix metrics over aligned prediction/truth bucket lists.

    Alignment is the caller's job (detection-to-footprint matching); this
    function is a pure, order-independent fold over the pairs.
    """
    if len(pred_buckets) != len(truth_buckets):
        raise ValueError(f"length mismatch: {len(pred_buckets)} predictions vs {len(truth_buckets)} truths")
    if not pred_buckets:
        raise ValueError("classification metrics need at least one aligned pair")
    tp = fp = fn = tn = 0
    for pred, truth in zip(pred_buckets, truth_buckets):
        if pred == positive:
            if truth == positive:
                tp += 1
            else:
                fp += 1
        elif truth == positive:
            fn += 1
        else:
            tn += 1
    counts = ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    f1 = (
        f1_score(precision, recall)
        if precision is not None and recall is not None and precision + recall > 0
        else None
    )
    return ClassificationReport(
        candidate_model=candidate_model,
        positive_class=positive,
        counts=counts,
        accuracy=(tp + tn) / counts.total,
        precision=precision,
        recall=recall,
        f1=f1,
    )


def load_stopwords(path: Path | None = None) -> frozenset[str]:
    """Stopword set from a file (one word per line, # comments), or the built-in list."""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = resources.files("damagepipe.data").joinpath("stopwords.txt").read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        word = line.strip().lower()
        if word and not word.startswith("#"):
            words.add(word)
    return frozenset(words)


def word_frequencies(
    texts_by_category: Mapping[int, Sequence[str]],
    stopwords: Iterable[str],
    top_k: int,
) -> dict[int, list[tuple[str, int]]]:
    """Top terms per damage category from the models' free-text descriptions.

    Texts are lowercased and tokenized on letters/digits (keeping internal
    apostrophes). Counted terms are non-stopword unigrams plus bigrams of
    tokens that were adjacent in the original text with both halves passing
    the stopword filter — so "total collapse" counts but "collapse of" does
    not, and removal of "of" never fabricates a "collapse roof" bigram.
    Unigrams and bigrams compete in one ranking: count descending, then term
    ascending. All four categories are present in the result, empty or not.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    stopset = {word.lower() for word in stopwords}
    result: dict[int, list[tuple[str, int]]] = {}
    for category in (1, 2, 3, 4):
        counter: Counter[str] = Counter()
        for text in texts_by_category.get(category, ()):
            tokens = _WORD_RE.findall(text.lower())
            kept = [token not in stopset for token in tokens]
            counter.update(token for token, keep in zip(tokens, kept) if keep)
            counter.update(
                f"{tokens[i]} {tokens[i + 1]}"
                for i in range(len(tokens) - 1)
                if kept[i] and kept[i + 1]
            )
        ranked = sorted(counter.items(), key=lambda item: (-item[1], item[0]))
        result[category] = ranked[:top_k]
    return result


def description_text(record: Mapping) -> str:
    """Free-text body of an assessment for term counting (no category label)."""
    parts = [record.get("reasoning", "")]
    parts.extend(record.get("hazards", ()))
    parts.extend(record.get("characteristics", ()))
    parts.extend(record.get("recommendations", ()))
    return " ".join(part for part in parts if part)


def evaluate_run(
    run_dir: Path,
    pairs: Sequence[ImagePairRecord],
    candidate_models: Sequence[str],
    *,
    iou_threshold: float = 0.5,
    positive_class: Bucket = Bucket.SEVERE,
    stopwords: Iterable[str] | None = None,
    top_k: int = 25,
) -> dict:
    """Score every candidate's assessments against ground-truth labels.

    For each pair the persisted detections are matched (greedy, by
    confidence) against post-disaster footprint boxes scaled into the same
    coordinate space; each match contributes one (predicted, truth) bucket
    pair per candidate. Writes ``metrics_report.json`` and
    ``term_frequencies.json`` (terms aggregated across candidates) and
    returns the metrics payload.
    """
    run_dir = Path(run_dir)
    counters = {
        "matched": 0,
        "unmatched_detections": 0,
        "unmatched_truths": 0,
        "unclassified_truths": 0,
        "unlabeled_pairs": 0,
        "missing_assessments": 0,
        "failed_assessments": 0,
    }
    aligned: dict[str, tuple[list[Bucket], list[Bucket]]] = {
        candidate: ([], []) for candidate in candidate_models
    }
    texts_by_category: dict[int, list[str]] = defaultdict(list)

    for pair in sorted(pairs, key=lambda p: p.pair_id):
        detection_path = run_dir / "detections" / f"{pair.pair_id}.json"
        if not detection_path.exists():
            raise FileNotFoundError(f"no detections for pair {pair.pair_id}: {detection_path}")
        stored = read_json(detection_path)
        if pair.post_labels_path is None:
            counters["unlabeled_pairs"] += 1
            continue
        annotations = [
            ann for ann in load_label_file(pair.post_labels_path) if _count_unclassified(ann, counters)
        ]
        factor = float(stored["scale_factor"])
        truth_boxes = [scale_bbox(polygon_to_bbox(ann.polygon), factor) for ann in annotations]
        detections = [
            (BBox(*entry["box"]), float(entry["confidence"])) for entry in stored["detections"]
        ]
        matches = match_detections(detections, truth_boxes, iou_threshold=iou_threshold)
        counters["matched"] += len(matches)
        counters["unmatched_detections"] += len(detections) - len(matches)
        counters["unmatched_truths"] += len(truth_boxes) - len(matches)
        for det_index, truth_index in matches:
            truth_bucket = to_bucket(annotations[truth_index].category)
            for candidate in candidate_models:
                record = _read_candidate_assessment(run_dir, candidate, pair.pair_id, det_index)
                if record is None:
                    counters["missing_assessments"] += 1
                    continue
                if record.get("failed"):
                    counters["failed_assessments"] += 1
                    continue
                preds, truths = aligned[candidate]
                preds.append(to_bucket(record["category"]))
                truths.append(truth_bucket)

    for candidate in candidate_models:
        for _, _, path in iter_assessment_files(run_dir, candidate):
            record = read_json(path)
            if not record.get("failed"):
                texts_by_category[int(record["category"])].append(description_text(record))

    reports = []
    for candidate in sorted(candidate_models):
        preds, truths = aligned[candidate]
        if not preds:
            logger.warning("candidate %s has no matched assessments; excluded from metrics", candidate)
            continue
        reports.append(
            classification_metrics(
                preds, truths, candidate_model=candidate, positive=positive_class
            ).as_dict()
        )

    metrics_payload = {
        "positive_class": positive_class.value,
        "iou_threshold": iou_threshold,
        "counters": counters,
        "candidates": reports,
    }
    write_json(run_dir / "metrics_report.json", metrics_payload)

    frequencies = word_frequencies(
        texts_by_category,
        load_stopwords() if stopwords is None else stopwords,
        top_k,
    )
    write_json(
        run_dir / "term_frequencies.json",
        {
            "top_k": top_k,
            "categories": {
                str(category): [{"term": term, "count": count} for term, count in ranked]
                for category, ranked in frequencies.items()
            },
        },
    )
    return metrics_payload


def _read_candidate_assessment(
    run_dir: Path, candidate_model: str, pair_id: str, index: int
) -> dict | None:
    path = run_dir / "assessments" / slugify_model(candidate_model) / pair_id / f"{index}.json"
    return read_json(path) if path.exists() else None


def _count_unclassified(annotation: BuildingAnnotation, counters: dict) -> bool:
    if annotation.category is None:
        counters["unclassified_truths"] += 1
        return False
    return True
