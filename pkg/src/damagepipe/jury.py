"""VLM-as-a-Jury evaluation: several models grade each candidate's assessments.

Each jury model sees the pre/post crops plus the candidate's assessment text
and returns a 0-100 score under a structural-engineer persona. Rankings are
mean scores per candidate over all (jury x item) verdicts, ties broken
lexicographically by candidate name.

The published rubric bands are 90-100 (excellent), 75-89 (good), 50-74 (weak),
and below 49 (critical failure), which leaves [49, 50) unassigned for
non-integer scores; this implementation extends critical-failure to everything
below 50 so the four bands partition [0, 100]. Reports carry a note about that
resolution.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .assess import (
    assessment_summary_text,
    extract_first_json_object,
    iter_assessment_files,
    query_with_repair,
    read_assessment,
)
from .gateway import BackendEndpoint, ChatRequest, Gateway, encode_image
from .prompts import build_jury_prompt
from .util import load_image, read_json, slugify_model, write_json

logger = logging.getLogger(__name__)

BAND_EXCELLENT = "excellent"
BAND_GOOD = "good"
BAND_WEAK = "weak"
BAND_CRITICAL = "critical-failure"

BAND_GAP_NOTE = (
    "scores in [49, 50) are assigned to critical-failure so the four rubric "
    "bands partition the full 0-100 range"
)


class VerdictParseError(ValueError):
    """Raised when a jury reply lacks a usable verdict JSON object."""


@dataclass(frozen=True)
class JuryVerdict:
    """One jury model's grade of one candidate assessment."""

    score: float
    classification_accuracy: str
    reasoning: str
    jury_model: str
    candidate_model: str

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 100.0):
            raise ValueError(f"score must be in [0, 100], got {self.score}")


@dataclass(frozen=True)
class RubricBand:
    """A labeled score interval from the grading rubric."""

    label: str
    lo: float
    hi: float


RUBRIC_BANDS = (
    RubricBand(BAND_EXCELLENT, 90.0, 100.0),
    RubricBand(BAND_GOOD, 75.0, 89.0),
    RubricBand(BAND_WEAK, 50.0, 74.0),
    RubricBand(BAND_CRITICAL, 0.0, 49.0),
)


@dataclass(frozen=True)
class JuryRanking:
    """Candidates ordered by mean verdict score, descending."""

    entries: tuple[tuple[str, float], ...]  # (candidate_model, mean_score)

    def __post_init__(self) -> None:
        for _, mean in self.entries:
            if not (0.0 <= mean <= 100.0):
                raise ValueError(f"mean score {mean} outside [0, 100]")
        keys = [(-mean, name) for name, mean in self.entries]
        if keys != sorted(keys):
            raise ValueError("entries are not in descending mean order with lexicographic ties")


def band_of(score: float) -> str:
    """Rubric band label for a score; total on [0, 100]."""
    if not (0.0 <= score <= 100.0):
        raise ValueError(f"score must be in [0, 100], got {score}")
    if score >= 90.0:
        return BAND_EXCELLENT
    if score >= 75.0:
        return BAND_GOOD
    if score >= 50.0:
        return BAND_WEAK
    return BAND_CRITICAL


def parse_verdict(jury_text: str, jury_model: str, candidate_model: str) -> JuryVerdict:
    """Extract the first JSON object from a jury reply and validate its score."""
    try:
        obj = extract_first_json_object(jury_text)
    except ValueError as exc:
        raise VerdictParseError(str(exc)) from exc
    score = _coerce_score(obj.get("score"))
    accuracy = obj.get("classification_accuracy", "")
    reasoning = obj.get("reasoning", "")
    return JuryVerdict(
        score=score,
        classification_accuracy=accuracy if isinstance(accuracy, str) else str(accuracy),
        reasoning=reasoning if isinstance(reasoning, str) else str(reasoning),
        jury_model=jury_model,
        candidate_model=candidate_model,
    )


def _coerce_score(value) -> float:
    if isinstance(value, bool) or value is None:
        raise VerdictParseError(f"score missing or invalid: {value!r}")
    if isinstance(value, (int, float)):
        score = float(value)
    elif isinstance(value, str):
        try:
            score = float(value.strip())
        except ValueError:
            raise VerdictParseError(f"score is not numeric: {value!r}") from None
    else:
        raise VerdictParseError(f"score is not numeric: {value!r}")
    if not (0.0 <= score <= 100.0):
        raise VerdictParseError(f"score {score} outside [0, 100]")
    return score


def model_family(model_name: str) -> str:
    """Family prefix used to flag self-evaluation, e.g. ``gemma3:27b -> gemma3``."""
    return model_name.split(":")[0].lower()


def aggregate_rankings(verdicts: Sequence[JuryVerdict]) -> JuryRanking:
    """Mean score per candidate over all verdicts, ordered descending.

    Ties are broken lexicographically by candidate name. Candidates appear
    only if they have at least one verdict in the input.
    """
    by_candidate: dict[str, list[float]] = defaultdict(list)
    for verdict in verdicts:
        by_candidate[verdict.candidate_model].append(verdict.score)
    entries = sorted(
        ((name, sum(scores) / len(scores)) for name, scores in by_candidate.items()),
        key=lambda item: (-item[1], item[0]),
    )
    return JuryRanking(entries=tuple(entries))


def evaluate_run(
    run_dir: Path,
    gateway: Gateway,
    chat_ep: BackendEndpoint,
    jury_models: Sequence[str],
    candidate_models: Sequence[str],
    max_inflight: int = 4,
    temperature: float = 0.0,
    seed: int | None = 0,
) -> dict:
    """Collect verdicts for every (jury, candidate, item) triple and rank.

    Verdict files live at ``jury/<jury>/<candidate>/<pair_id>/<index>.json``
    and double as resume checkpoints. On the happy path this issues exactly
    n_jury x n_candidates x n_items chat calls. The ranking (with per-candidate
    verdict/failure counts, band histogram, and same-family verdict counts)
    is written to ``jury_report.json`` and returned.
    """
    run_dir = Path(run_dir)
    work: list[dict] = []
    for candidate in candidate_models:
        for pair_id, index, path in iter_assessment_files(run_dir, candidate):
            record = read_assessment(path)
            if record.get("failed"):
                continue
            for jury_model in jury_models:
                out_path = (
                    run_dir / "jury" / slugify_model(jury_model) / slugify_model(candidate)
                    / pair_id / f"{index}.json"
                )
                if out_path.exists():
                    continue
                work.append(
                    {
                        "jury_model": jury_model,
                        "candidate_model": candidate,
                        "pair_id": pair_id,
                        "index": index,
                        "record": record,
                        "out_path": out_path,
                    }
                )

    if work:
        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            list(
                pool.map(
                    lambda item: _grade_item(item, run_dir, gateway, chat_ep, temperature, seed),
                    work,
                )
            )

    return _write_report(run_dir, jury_models, candidate_models)


def _grade_item(
    item: dict,
    run_dir: Path,
    gateway: Gateway,
    chat_ep: BackendEndpoint,
    temperature: float,
    seed: int | None,
) -> None:
    pair_id, index = item["pair_id"], item["index"]
    jury_model, candidate = item["jury_model"], item["candidate_model"]
    prompt = build_jury_prompt(assessment_summary_text(item["record"]))
    images = tuple(
        encode_image(load_image(run_dir / "crops" / pair_id / f"{index}_{phase}.png"))
        for phase in ("pre", "post")
    )
    request = ChatRequest(
        model_name=jury_model, prompt=prompt, images=images, temperature=temperature, seed=seed
    )
    parsed, raw, repair_used, error = query_with_repair(
        gateway, chat_ep, request, lambda text: parse_verdict(text, jury_model, candidate)
    )
    base = {
        "jury_model": jury_model,
        "candidate_model": candidate,
        "pair_id": pair_id,
        "index": index,
        "same_family": model_family(jury_model) == model_family(candidate),
        "repair_used": repair_used,
    }
    if parsed is None:
        write_json(item["out_path"], {**base, "failed": True, "error": error, "raw_response": raw})
        return
    assert isinstance(parsed, JuryVerdict)
    write_json(
        item["out_path"],
        {
            **base,
            "failed": False,
            "score": parsed.score,
            "band": band_of(parsed.score),
            "classification_accuracy": parsed.classification_accuracy,
            "reasoning": parsed.reasoning,
        },
    )


def _write_report(run_dir: Path, jury_models: Sequence[str], candidate_models: Sequence[str]) -> dict:
    verdicts: list[JuryVerdict] = []
    failures: dict[str, int] = defaultdict(int)
    same_family: dict[str, int] = defaultdict(int)
    bands: dict[str, dict[str, int]] = defaultdict(
        lambda: {band.label: 0 for band in RUBRIC_BANDS}
    )
    jury_root = run_dir / "jury"
    for path in sorted(jury_root.rglob("*.json")) if jury_root.is_dir() else []:
        record = read_json(path)
        candidate = record["candidate_model"]
        if record.get("failed"):
            failures[candidate] += 1
            continue
        verdicts.append(
            JuryVerdict(
                score=float(record["score"]),
                classification_accuracy=record.get("classification_accuracy", ""),
                reasoning=record.get("reasoning", ""),
                jury_model=record["jury_model"],
                candidate_model=candidate,
            )
        )
        bands[candidate][record["band"]] += 1
        if record.get("same_family"):
            same_family[candidate] += 1

    graded = {v.candidate_model for v in verdicts}
    for candidate in candidate_models:
        if candidate not in graded:
            logger.warning("candidate %s has zero successful verdicts; excluded from ranking", candidate)

    ranking = aggregate_rankings(verdicts)
    by_candidate: dict[str, list[float]] = defaultdict(list)
    for verdict in verdicts:
        by_candidate[verdict.candidate_model].append(verdict.score)
    payload = {
        "jury_models": sorted(jury_models),
        "notes": [BAND_GAP_NOTE],
        "ranking": [
            {
                "candidate_model": name,
                "mean_score": mean,
                "n_verdicts": len(by_candidate[name]),
                "n_failures": failures.get(name, 0),
                "same_family_verdicts": same_family.get(name, 0),
                "band_histogram": bands[name],
            }
            for name, mean in ranking.entries
        ],
    }
    write_json(run_dir / "jury_report.json", payload)
    return payload
