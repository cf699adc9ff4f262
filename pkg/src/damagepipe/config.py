"""Run configuration: one JSON file, validated, with dotted-path overrides.

The parameter surface (endpoints x models x thresholds) is too wide for
flags, so everything lives in a single config file; ``--set key=value``
overrides individual keys by dotted path. Unknown keys are rejected by name
to catch typos before a long run burns backend budget.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .clip_eval import ScoreConfig
from .gateway import BackendEndpoint
from .metrics import Bucket

RUN_DIR_ENV = "DAMAGEPIPE_RUN_DIR"

DEFAULT_CANDIDATES = ("gemma3:12b", "gemma3:27b", "qwen3-vl:8b", "qwen3-vl:32b")
DEFAULT_JURORS = ("gemma3:12b", "gemma3:27b", "qwen3-vl:8b", "ministral-3:14b")

_ENDPOINT_KEYS = {"base_url", "model_name", "timeout_s", "max_retries"}
_KNOWN_KEYS: dict[str, Any] = {
    "dataset_root": None,
    "run_id": None,
    "run_dir": None,
    "candidate_models": None,
    "jury_models": None,
    "max_inflight": None,
    "endpoints": "endpoint-map",
    "super_resolution": {"enabled", "factor"},
    "detection": {"confidence_threshold"},
    "crop": {"pad_fraction", "granularity"},
    "score": {"w", "chunk_limit", "target", "caption_source"},
    "metrics": {"positive_class", "iou_threshold", "top_k"},
    "report": {"dataset_label"},
    "mock": {"enabled", "seed", "chat_mode", "embed_dim", "host", "port"},
}


class ConfigError(ValueError):
    """Raised for unknown keys, missing requirements, or invariant violations."""


@dataclass(frozen=True)
class MockSettings:
    """In-process mock backend switches (used by tests and ``mock-serve``)."""

    enabled: bool = False
    seed: int = 0
    chat_mode: str = "normal"
    embed_dim: int = 64
    host: str = "127.0.0.1"
    port: int = 0


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI invocation needs, with published defaults filled in."""

    dataset_root: Path | None
    run_dir: Path
    run_id: str = "run"
    endpoints: Mapping[str, BackendEndpoint] = field(default_factory=dict)
    candidate_models: tuple[str, ...] = DEFAULT_CANDIDATES
    jury_models: tuple[str, ...] = DEFAULT_JURORS
    sr_enabled: bool = True
    sr_factor: int = 4
    confidence_threshold: float = 0.25
    pad_fraction: float = 0.30
    granularity: str = "cropped"
    score: ScoreConfig = field(default_factory=ScoreConfig)
    caption_source: str = "fields"
    positive_class: Bucket = Bucket.SEVERE
    iou_threshold: float = 0.5
    top_k: int = 25
    dataset_label: str = "Dataset"
    max_inflight: int = 4
    mock: MockSettings = field(default_factory=MockSettings)

    def endpoint(self, capability: str) -> BackendEndpoint:
        try:
            return self.endpoints[capability]
        except KeyError:
            raise ConfigError(f"endpoints.{capability} is not configured") from None

    def snapshot(self) -> dict:
        """Config as JSON-compatible data with host-specific paths excluded.

        Run manifests embed this snapshot; leaving absolute paths out keeps
        two runs over the same data byte-comparable regardless of where the
        directories live.
        """
        return {
            "run_id": self.run_id,
            "candidate_models": list(self.candidate_models),
            "jury_models": list(self.jury_models),
            "super_resolution": {"enabled": self.sr_enabled, "factor": self.sr_factor},
            "detection": {"confidence_threshold": self.confidence_threshold},
            "crop": {"pad_fraction": self.pad_fraction, "granularity": self.granularity},
            "score": {
                "w": self.score.w,
                "chunk_limit": self.score.chunk_limit,
                "target": self.score.target,
                "caption_source": self.caption_source,
            },
            "metrics": {
                "positive_class": self.positive_class.value,
                "iou_threshold": self.iou_threshold,
                "top_k": self.top_k,
            },
            "report": {"dataset_label": self.dataset_label},
            "max_inflight": self.max_inflight,
            "mock": {"enabled": self.mock.enabled, "seed": self.mock.seed,
                     "chat_mode": self.mock.chat_mode, "embed_dim": self.mock.embed_dim},
        }


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply ``--set a.b.c=value`` assignments onto parsed config data.

    Values parse as JSON when possible (numbers, booleans, lists) and fall
    back to plain strings, so ``--set crop.pad_fraction=0.4`` and
    ``--set report.dataset_label=Moore Tornado`` both work.
    """
    for assignment in assignments:
        key, sep, value = assignment.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {assignment!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        target = raw
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot override {key}: {part} is not a section")
        target[parts[-1]] = parsed
    return raw


def load_config(path: Path, overrides: list[str] | None = None) -> RunConfig:
    """Parse, override, validate, and default-fill a JSON config file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if overrides:
        apply_overrides(raw, overrides)
    _reject_unknown_keys(raw)
    return _build(raw)


def _reject_unknown_keys(raw: Mapping) -> None:
    for key, value in raw.items():
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        known = _KNOWN_KEYS[key]
        if known == "endpoint-map":
            for capability, entry in _as_section(key, value).items():
                for sub in _as_section(f"{key}.{capability}", entry):
                    if sub not in _ENDPOINT_KEYS:
                        raise ConfigError(f"unknown config key: {key}.{capability}.{sub}")
        elif isinstance(known, set):
            for sub in _as_section(key, value):
                if sub not in known:
                    raise ConfigError(f"unknown config key: {key}.{sub}")


def _as_section(name: str, value) -> Mapping:
    if not isinstance(value, Mapping):
        raise ConfigError(f"config key {name} must be an object")
    return value


def _build(raw: Mapping) -> RunConfig:
    run_id = _typed(raw, "run_id", str, "run")
    run_dir = os.environ.get(RUN_DIR_ENV) or raw.get("run_dir") or str(Path("runs") / run_id)
    endpoints = {
        capability: _endpoint(capability, entry)
        for capability, entry in raw.get("endpoints", {}).items()
    }
    sr = raw.get("super_resolution", {})
    crop = raw.get("crop", {})
    score = raw.get("score", {})
    metrics = raw.get("metrics", {})
    mock = raw.get("mock", {})
    try:
        score_cfg = ScoreConfig(
            w=_typed(score, "w", float, 2.5),
            chunk_limit=_typed(score, "chunk_limit", int, 77),
            target=_typed(score, "target", str, "post"),
        )
    except ValueError as exc:
        raise ConfigError(f"score: {exc}") from None
    config = RunConfig(
        dataset_root=Path(raw["dataset_root"]) if raw.get("dataset_root") else None,
        run_dir=Path(run_dir),
        run_id=run_id,
        endpoints=endpoints,
        candidate_models=_models(raw, "candidate_models", DEFAULT_CANDIDATES),
        jury_models=_models(raw, "jury_models", DEFAULT_JURORS),
        sr_enabled=_typed(sr, "enabled", bool, True),
        sr_factor=_typed(sr, "factor", int, 4),
        confidence_threshold=_typed(raw.get("detection", {}), "confidence_threshold", float, 0.25),
        pad_fraction=_typed(crop, "pad_fraction", float, 0.30),
        granularity=_typed(crop, "granularity", str, "cropped"),
        score=score_cfg,
        caption_source=_typed(score, "caption_source", str, "fields"),
        positive_class=_bucket(metrics.get("positive_class", "severe")),
        iou_threshold=_typed(metrics, "iou_threshold", float, 0.5),
        top_k=_typed(metrics, "top_k", int, 25),
        dataset_label=_typed(raw.get("report", {}), "dataset_label", str, "Dataset"),
        max_inflight=_typed(raw, "max_inflight", int, 4),
        mock=MockSettings(
            enabled=_typed(mock, "enabled", bool, False),
            seed=_typed(mock, "seed", int, 0),
            chat_mode=_typed(mock, "chat_mode", str, "normal"),
            embed_dim=_typed(mock, "embed_dim", int, 64),
            host=_typed(mock, "host", str, "127.0.0.1"),
            port=_typed(mock, "port", int, 0),
        ),
    )
    _validate(config)
    return config


def _endpoint(capability: str, entry) -> BackendEndpoint:
    section = _as_section(f"endpoints.{capability}", entry)
    if "base_url" not in section:
        raise ConfigError(f"endpoints.{capability}.base_url is required")
    return BackendEndpoint(
        base_url=str(section["base_url"]),
        model_name=_typed(section, "model_name", str, ""),
        timeout_s=_typed(section, "timeout_s", float, 120.0),
        max_retries=_typed(section, "max_retries", int, 2),
    )


def _models(raw: Mapping, key: str, default: tuple[str, ...]) -> tuple[str, ...]:
    value = raw.get(key)
    if value is None:
        return default
    if not isinstance(value, list) or not all(isinstance(m, str) and m for m in value):
        raise ConfigError(f"{key} must be a list of non-empty strings")
    return tuple(value)


def _bucket(label) -> Bucket:
    try:
        return Bucket(label)
    except ValueError:
        raise ConfigError(f"metrics.positive_class must be 'minor' or 'severe', got {label!r}") from None


def _typed(section: Mapping, key: str, kind: type, default):
    value = section.get(key, default)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
    elif not isinstance(value, kind):
        raise ConfigError(f"{key} must be {kind.__name__}, got {value!r}")
    return value


def _validate(config: RunConfig) -> None:
    if config.pad_fraction < 0:
        raise ConfigError(f"crop.pad_fraction must be >= 0, got {config.pad_fraction}")
    if config.max_inflight < 1:
        raise ConfigError(f"max_inflight must be >= 1, got {config.max_inflight}")
    if config.sr_factor < 1:
        raise ConfigError(f"super_resolution.factor must be >= 1, got {config.sr_factor}")
    if not (0.0 <= config.confidence_threshold <= 1.0):
        raise ConfigError(
            f"detection.confidence_threshold must be in [0, 1], got {config.confidence_threshold}"
        )
    if not (0.0 < config.iou_threshold <= 1.0):
        raise ConfigError(f"metrics.iou_threshold must be in (0, 1], got {config.iou_threshold}")
    if config.granularity not in ("cropped", "full"):
        raise ConfigError(f"crop.granularity must be 'cropped' or 'full', got {config.granularity!r}")
    if config.caption_source not in ("fields", "raw"):
        raise ConfigError(f"score.caption_source must be 'fields' or 'raw', got {config.caption_source!r}")
    if config.top_k < 1:
        raise ConfigError(f"metrics.top_k must be >= 1, got {config.top_k}")
    if config.mock.chat_mode not in ("normal", "garbage-unless-repaired"):
        raise ConfigError(f"mock.chat_mode invalid: {config.mock.chat_mode!r}")
