"""Deterministic prompt construction for assessment and jury chat calls.

Both builders are pure string functions: identical inputs yield identical
bytes, which keeps chat requests (and therefore mock-backed runs) reproducible.
"""

from __future__ import annotations

from collections.abc import Mapping

from .xbd import DamageCategory

JURY_PERSONA = "Senior Structural Engineer and Disaster Response Evaluator"

# Appended to the original prompt when a model's reply could not be parsed;
# one repair attempt per item keeps worst-case cost at two chat calls.
REPAIR_INSTRUCTION = (
    "Your previous response could not be parsed. Reply again with ONLY the "
    "requested JSON object: no code fences, no surrounding prose."
)

DEFAULT_SCALE_DEFINITIONS: Mapping[DamageCategory, str] = {
    DamageCategory.NO_SLIGHT: "undamaged or superficial marks only; structure fully intact",
    DamageCategory.MODERATE: "visible damage to roof or walls; structure standing and repairable",
    DamageCategory.SEVERE: "major structural damage; partial collapse or compromised load paths",
    DamageCategory.DESTROYED: "total collapse or destruction beyond repair",
}

RUBRIC_BAND_LINES = (
    "90-100 (excellent)",
    "75-89 (good)",
    "50-74 (weak)",
    "below 49 (critical failure)",
)


def scale_lines(scale_definitions: Mapping[DamageCategory, str]) -> list[str]:
    return [
        f"({category.value}) {category.label}: {scale_definitions[category]}"
        for category in DamageCategory
    ]


def build_assessment_prompt(scale_definitions: Mapping[DamageCategory, str] | None = None) -> str:
    """Prompt asking a VLM to grade one building from its pre/post image pair."""
    definitions = scale_definitions if scale_definitions is not None else DEFAULT_SCALE_DEFINITIONS
    lines = [
        "You are assessing building damage from satellite imagery.",
        "The first image shows the building before the disaster; the second shows the same building after.",
        "Compare the two images and classify the severity of building damage on this four-level scale:",
        *scale_lines(definitions),
        "",
        "Respond with ONLY a JSON object with these keys:",
        '  "category": integer 1-4 from the scale above,',
        '  "reasoning": short narrative comparing the pre and post images,',
        '  "hazards": list of strings describing the nature of hazards present,',
        '  "characteristics": list of strings describing the damaged building,',
        '  "recommendations": list of strings with essential safety recommendations for rescue teams.',
    ]
    return "\n".join(lines)


def build_jury_prompt(assessment_text: str, scale_definitions: Mapping[DamageCategory, str] | None = None) -> str:
    """Prompt asking a jury model to grade another model's assessment 0-100."""
    definitions = scale_definitions if scale_definitions is not None else DEFAULT_SCALE_DEFINITIONS
    lines = [
        f"You are acting as a {JURY_PERSONA}.",
        "You are shown a building before and after a disaster, followed by another model's damage assessment.",
        "Grade how well that assessment matches the imagery, on a 0-100 scale:",
        *[f"  {band}" for band in RUBRIC_BAND_LINES],
        "",
        "The damage scale the assessment used:",
        *scale_lines(definitions),
        "",
        "Candidate assessment to grade:",
        "---",
        assessment_text,
        "---",
        "",
        "Respond with ONLY a JSON object with these keys:",
        '  "score": number between 0 and 100,',
        '  "classification_accuracy": short note on whether the damage category is right,',
        '  "reasoning": short justification for the score.',
    ]
    return "\n".join(lines)


def repair_prompt(original_prompt: str, raw_response: str) -> str:
    """The one-shot re-prompt sent after an unparseable model response."""
    del raw_response  # kept in the signature for future use; persisted separately
    return original_prompt + "\n\n" + REPAIR_INSTRUCTION
