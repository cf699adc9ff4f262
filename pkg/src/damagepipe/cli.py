"""Command-line entry point tying the pipeline stages together.

Usage::

    damagepipe <assess|eval-clip|eval-jury|metrics|report|mock-serve>
               --config <path> [--set key=value ...]

Every stage reads and writes one run directory; artifacts double as resume
checkpoints, so re-running a finished stage touches no backend. The
``DAMAGEPIPE_RUN_DIR`` environment variable overrides the configured run_dir.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from enum import IntEnum
from pathlib import Path

from . import clip_eval, jury, metrics, report
from .assess import AssessOptions, iter_assessment_files, run_event
from .config import ConfigError, RunConfig, load_config
from .gateway import BackendEndpoint, BackendUnavailableError, Gateway, HttpTransport
from .mock_backend import MockBackend, MockTransport, create_mock_server
from .util import write_json
from .xbd import LabelLoadError, PairConsistencyError, discover_pairs

logger = logging.getLogger(__name__)

_MOCK_MODEL_NAMES = {"chat": "", "upscale": "sr-model", "detect": "detector", "clip": "clip-encoder"}


class ExitStatus(IntEnum):
    SUCCESS = 0
    PARTIAL_FAILURES = 1
    CONFIG_ERROR = 2
    BACKEND_UNAVAILABLE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="damagepipe",
        description="Post-disaster building damage assessment pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("assess", "detect buildings and collect VLM damage assessments"),
        ("eval-clip", "score persisted assessments with chunked CLIPScore"),
        ("eval-jury", "grade assessments with the jury panel and rank candidates"),
        ("metrics", "compare assessments against ground-truth labels"),
        ("report", "render tables, CSVs, and charts from existing reports"),
        ("mock-serve", "serve the deterministic mock backend over HTTP"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, type=Path, help="path to the JSON config file")
        cmd.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key by dotted path (repeatable)",
        )
    return parser


def run_command(argv: list[str]) -> ExitStatus:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        handler = {
            "assess": _cmd_assess,
            "eval-clip": _cmd_eval_clip,
            "eval-jury": _cmd_eval_jury,
            "metrics": _cmd_metrics,
            "report": _cmd_report,
            "mock-serve": _cmd_mock_serve,
        }[args.command]
        return handler(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ExitStatus.CONFIG_ERROR
    except report.ReportInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.CONFIG_ERROR
    except (LabelLoadError, PairConsistencyError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return ExitStatus.CONFIG_ERROR
    except BackendUnavailableError as exc:
        print(f"backend unavailable: {exc}", file=sys.stderr)
        return ExitStatus.BACKEND_UNAVAILABLE


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(int(run_command(sys.argv[1:])))


def _build_gateway(config: RunConfig) -> Gateway:
    if config.mock.enabled:
        backend = MockBackend(
            seed=config.mock.seed, chat_mode=config.mock.chat_mode, embed_dim=config.mock.embed_dim
        )
        return Gateway(MockTransport(backend), backoff_s=0.0)
    return Gateway(HttpTransport())


def _endpoint(config: RunConfig, capability: str) -> BackendEndpoint:
    """Configured endpoint, or an implicit in-process one under the mock."""
    if capability in config.endpoints:
        return config.endpoints[capability]
    if config.mock.enabled:
        return BackendEndpoint(
            base_url="mock://local",
            model_name=_MOCK_MODEL_NAMES.get(capability, capability),
            timeout_s=30.0,
            max_retries=1,
        )
    return config.endpoint(capability)  # raises ConfigError naming the capability


def _require_candidates(config: RunConfig) -> None:
    if not config.candidate_models:
        raise ConfigError("candidate_models must be non-empty for this command")


def _discover(config: RunConfig) -> list:
    if config.dataset_root is None:
        raise ConfigError("dataset_root is required for this command")
    pairs = discover_pairs(config.dataset_root)
    if not pairs:
        raise ConfigError(f"no image pairs found under {config.dataset_root}")
    return pairs


def _require_assessments(config: RunConfig) -> None:
    for candidate in config.candidate_models:
        if any(True for _ in iter_assessment_files(config.run_dir, candidate)):
            return
    raise ConfigError(f"no assessments found in {config.run_dir}; run `assess` first")


def _cmd_assess(config: RunConfig) -> ExitStatus:
    _require_candidates(config)
    pairs = _discover(config)
    gateway = _build_gateway(config)
    options = AssessOptions(
        run_dir=config.run_dir,
        endpoints={cap: _endpoint(config, cap) for cap in ("chat", "upscale", "detect")},
        run_id=config.run_id,
        sr_enabled=config.sr_enabled,
        sr_factor=config.sr_factor,
        confidence_threshold=config.confidence_threshold,
        pad_fraction=config.pad_fraction,
        granularity=config.granularity,
        max_inflight=config.max_inflight,
        config_snapshot=config.snapshot(),
    )
    manifests = {}
    failures = 0
    for candidate in config.candidate_models:
        manifest = run_event(options, pairs, gateway, candidate)
        manifests[candidate] = manifest
        failures += manifest.counts.get("failures", 0)
        print(
            f"assess {candidate}: {manifest.counts.get('assessments', 0)} assessed, "
            f"{manifest.counts.get('failures', 0)} failed over {manifest.counts.get('pairs', 0)} pairs"
        )
    _write_run_manifest(config, manifests)
    return ExitStatus.PARTIAL_FAILURES if failures else ExitStatus.SUCCESS


def _write_run_manifest(config: RunConfig, manifests: dict) -> None:
    manifest_path = Path(config.run_dir) / "manifest.json"
    total_new_calls = sum(
        sum(manifest.backend_calls.values()) for manifest in manifests.values()
    )
    if manifest_path.exists() and total_new_calls == 0:
        return  # nothing new happened; the original manifest still describes the run
    write_json(
        manifest_path,
        {
            "run_id": config.run_id,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "config": config.snapshot(),
            "candidates": {
                name: {
                    "counts": manifest.counts,
                    "backend_calls": manifest.backend_calls,
                    "timings": manifest.timings,
                }
                for name, manifest in sorted(manifests.items())
            },
        },
    )


def _cmd_eval_clip(config: RunConfig) -> ExitStatus:
    _require_candidates(config)
    _require_assessments(config)
    gateway = _build_gateway(config)
    payload = clip_eval.evaluate_run(
        config.run_dir,
        gateway,
        _endpoint(config, "clip"),
        config.score,
        config.candidate_models,
        caption_source=config.caption_source,
    )
    for row in payload["reports"]:
        print(
            f"clip {row['candidate_model']}: avg {row['avg']:.2f} "
            f"(min {row['min']:.2f}, max {row['max']:.2f}) over {row['n_captions']} captions"
        )
    return ExitStatus.PARTIAL_FAILURES if payload["failures"] else ExitStatus.SUCCESS


def _cmd_eval_jury(config: RunConfig) -> ExitStatus:
    _require_candidates(config)
    if not config.jury_models:
        raise ConfigError("jury_models must be non-empty for eval-jury")
    _require_assessments(config)
    gateway = _build_gateway(config)
    payload = jury.evaluate_run(
        config.run_dir,
        gateway,
        _endpoint(config, "chat"),
        jury_models=config.jury_models,
        candidate_models=config.candidate_models,
        max_inflight=config.max_inflight,
    )
    for row in payload["ranking"]:
        print(
            f"jury {row['candidate_model']}: mean {row['mean_score']:.2f} "
            f"over {row['n_verdicts']} verdicts ({row['n_failures']} failed)"
        )
    any_failures = any(row["n_failures"] for row in payload["ranking"])
    return ExitStatus.PARTIAL_FAILURES if any_failures else ExitStatus.SUCCESS


def _cmd_metrics(config: RunConfig) -> ExitStatus:
    _require_candidates(config)
    _require_assessments(config)
    pairs = _discover(config)
    payload = metrics.evaluate_run(
        config.run_dir,
        pairs,
        list(config.candidate_models),
        iou_threshold=config.iou_threshold,
        positive_class=config.positive_class,
        top_k=config.top_k,
    )
    for row in payload["candidates"]:
        print(
            f"metrics {row['candidate_model']}: accuracy {report.format_accuracy_percent(row['accuracy'])}%, "
            f"f1 {report.format_real(row['f1'])}"
        )
    failed = payload["counters"]["failed_assessments"]
    return ExitStatus.PARTIAL_FAILURES if failed else ExitStatus.SUCCESS


def _cmd_report(config: RunConfig) -> ExitStatus:
    written = report.write_reports(config.run_dir, dataset_label=config.dataset_label)
    for path in written:
        if path.suffix == ".txt":
            print(path.read_text(encoding="utf-8"))
    print(f"report: wrote {len(written)} files under {Path(config.run_dir) / 'report'}")
    return ExitStatus.SUCCESS


def _cmd_mock_serve(config: RunConfig) -> ExitStatus:
    backend = MockBackend(
        seed=config.mock.seed, chat_mode=config.mock.chat_mode, embed_dim=config.mock.embed_dim
    )
    server = create_mock_server(backend, host=config.mock.host, port=config.mock.port)
    host, port = server.server_address[:2]
    print(f"mock backend serving at http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return ExitStatus.SUCCESS


if __name__ == "__main__":
    main()
