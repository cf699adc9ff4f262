"""Reference-free caption scoring: CLIPScore with 77-token chunking.

The score for one (image, text) embedding pair is

    w * max(100 * cos(e_img, e_text), 0)

with w = 2.5 by default. CLIP text encoders cap input length at 77 tokens, so
long captions are tokenized, split into consecutive token chunks, decoded back
to text, and each chunk is scored; a caption reports the average, minimum, and
maximum over its chunks. Dataset-level figures aggregate per-caption averages.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .assess import assessment_caption, iter_assessment_files, read_assessment
from .gateway import BackendEndpoint, Embedding, Gateway
from .util import load_image, read_json, slugify_model, write_json

logger = logging.getLogger(__name__)

DEFAULT_W = 2.5
DEFAULT_CHUNK_LIMIT = 77
TARGET_POST = "post"
TARGET_PRE = "pre"


class EmptyCaptionError(ValueError):
    """Raised when asked to score an empty caption or chunk an empty id list."""


@dataclass(frozen=True)
class ScoreConfig:
    """Tunables for CLIPScore evaluation."""

    w: float = DEFAULT_W
    chunk_limit: int = DEFAULT_CHUNK_LIMIT
    target: str = TARGET_POST

    def __post_init__(self) -> None:
        if not (self.w > 0 and math.isfinite(self.w)):
            raise ValueError(f"w must be > 0, got {self.w}")
        if self.chunk_limit < 1:
            raise ValueError(f"chunk_limit must be >= 1, got {self.chunk_limit}")
        if self.target not in (TARGET_POST, TARGET_PRE):
            raise ValueError(f"target must be '{TARGET_POST}' or '{TARGET_PRE}', got {self.target!r}")


@dataclass(frozen=True)
class ChunkScores:
    """Per-chunk scores for one caption plus their summary statistics."""

    per_chunk: tuple[float, ...]
    avg: float
    min: float
    max: float

    def __post_init__(self) -> None:
        if not self.per_chunk:
            raise ValueError("per_chunk must be non-empty")
        if any(s < 0 for s in self.per_chunk):
            raise ValueError("chunk scores must be >= 0")
        if not (
            math.isclose(self.avg, sum(self.per_chunk) / len(self.per_chunk), abs_tol=1e-9)
            and self.min == min(self.per_chunk)
            and self.max == max(self.per_chunk)
        ):
            raise ValueError("avg/min/max inconsistent with per_chunk scores")

    @classmethod
    def from_scores(cls, scores: Sequence[float]) -> "ChunkScores":
        scores = tuple(scores)
        if not scores:
            raise EmptyCaptionError("cannot summarize an empty score list")
        return cls(scores, sum(scores) / len(scores), min(scores), max(scores))


@dataclass(frozen=True)
class DatasetClipReport:
    """Aggregate CLIPScore row for one candidate model over a dataset."""

    candidate_model: str
    n_captions: int
    avg: float
    max: float
    min: float

    def __post_init__(self) -> None:
        if self.n_captions < 1:
            raise ValueError("n_captions must be >= 1")
        if not (self.min <= self.avg <= self.max):
            raise ValueError(f"expected min <= avg <= max, got {self.min}, {self.avg}, {self.max}")


def chunk_tokens(token_ids: Sequence[int], limit: int) -> list[list[int]]:
    """Split token ids into consecutive chunks of at most ``limit`` ids.

    The concatenation of the chunks reproduces the input exactly; the final
    chunk may be shorter. Empty input raises :class:`EmptyCaptionError`.
    """
    if limit < 1:
        raise ValueError(f"limit must be >= 1, got {limit}")
    ids = list(token_ids)
    if not ids:
        raise EmptyCaptionError("cannot chunk an empty token list")
    return [ids[i : i + limit] for i in range(0, len(ids), limit)]


def clip_score(image_emb: Embedding, text_emb: Embedding, cfg: ScoreConfig) -> float:
    """Score one (image, text) pair: ``w * max(100 * cosine, 0)``.

    Both embeddings are unit vectors by the gateway contract, so the cosine is
    their dot product.
    """
    if image_emb.dim != text_emb.dim:
        raise ValueError(f"embedding dims differ: image {image_emb.dim} vs text {text_emb.dim}")
    cosine = float(np.dot(image_emb.vector, text_emb.vector))
    return cfg.w * max(100.0 * cosine, 0.0)


def score_caption(
    caption: str,
    image_emb: Embedding,
    ep: BackendEndpoint,
    cfg: ScoreConfig,
    gateway: Gateway,
) -> ChunkScores:
    """Chunk a caption, embed each chunk, and score it against one image.

    Pipeline per caption: tokenize -> chunk ids -> decode each chunk back to
    text -> embed chunk text -> clip_score against ``image_emb``.
    """
    if not caption or not caption.strip():
        raise EmptyCaptionError("cannot score an empty caption")
    token_ids = gateway.tokenize(ep, caption)
    if not token_ids:
        raise EmptyCaptionError("caption tokenized to zero tokens")
    scores = []
    for chunk in chunk_tokens(token_ids, cfg.chunk_limit):
        chunk_text = gateway.decode_tokens(ep, chunk)
        text_emb = gateway.embed(ep, chunk_text)
        scores.append(clip_score(image_emb, text_emb, cfg))
    return ChunkScores.from_scores(scores)


def aggregate_dataset(per_caption: Sequence[ChunkScores], candidate_model: str) -> DatasetClipReport:
    """Aggregate per-caption averages into one dataset-level report row."""
    if not per_caption:
        raise ValueError("cannot aggregate an empty caption list")
    avgs = [c.avg for c in per_caption]
    return DatasetClipReport(
        candidate_model=candidate_model,
        n_captions=len(avgs),
        avg=sum(avgs) / len(avgs),
        max=max(avgs),
        min=min(avgs),
    )


def evaluate_run(
    run_dir: Path,
    gateway: Gateway,
    ep: BackendEndpoint,
    cfg: ScoreConfig,
    candidate_models: Sequence[str],
    caption_source: str = "fields",
) -> dict:
    """Score every persisted assessment in a run directory.

    Per-caption results land in ``clip/<candidate>/<pair_id>/<index>.json``
    (existing files are reused, making re-runs cheap); the dataset aggregate is
    written to ``clip_report.json`` and returned. Captions default to the
    assessment-field concatenation; ``caption_source="raw"`` scores the
    verbatim model response instead.
    """
    if caption_source not in ("fields", "raw"):
        raise ValueError(f"caption_source must be 'fields' or 'raw', got {caption_source!r}")
    run_dir = Path(run_dir)
    reports = []
    failures: dict[str, int] = {}
    for candidate in candidate_models:
        slug = slugify_model(candidate)
        per_caption: list[ChunkScores] = []
        failed = 0
        for pair_id, index, path in iter_assessment_files(run_dir, candidate):
            record = read_assessment(path)
            if record.get("failed"):
                continue
            out_path = run_dir / "clip" / slug / pair_id / f"{index}.json"
            if out_path.exists():
                cached = read_json(out_path)
                per_caption.append(ChunkScores.from_scores(cached["per_chunk"]))
                continue
            caption = record["raw_response"] if caption_source == "raw" else assessment_caption(record)
            patch_path = run_dir / "crops" / pair_id / f"{index}_{cfg.target}.png"
            try:
                image_emb = gateway.embed(ep, load_image(patch_path))
                chunk_scores = score_caption(caption, image_emb, ep, cfg, gateway)
            except (EmptyCaptionError, FileNotFoundError) as exc:
                logger.warning("clip scoring failed for %s %s/%s: %s", candidate, pair_id, index, exc)
                failed += 1
                continue
            per_caption.append(chunk_scores)
            write_json(
                out_path,
                {
                    "candidate_model": candidate,
                    "pair_id": pair_id,
                    "index": index,
                    "caption": caption,
                    "target": cfg.target,
                    "per_chunk": list(chunk_scores.per_chunk),
                    "avg": chunk_scores.avg,
                    "min": chunk_scores.min,
                    "max": chunk_scores.max,
                },
            )
        if failed:
            failures[candidate] = failed
        if per_caption:
            reports.append(aggregate_dataset(per_caption, candidate))
        else:
            logger.warning("no scoreable captions for candidate %s", candidate)
    payload = {
        "w": cfg.w,
        "chunk_limit": cfg.chunk_limit,
        "target": cfg.target,
        "caption_source": caption_source,
        "failures": failures,
        "reports": [
            {
                "candidate_model": r.candidate_model,
                "n_captions": r.n_captions,
                "avg": r.avg,
                "max": r.max,
                "min": r.min,
            }
            for r in sorted(reports, key=lambda r: r.candidate_model)
        ],
    }
    write_json(run_dir / "clip_report.json", payload)
    return payload
