"""In-process tests for the command-line interface and its exit codes."""

import json

import pytest

from damagepipe.cli import ExitStatus, build_parser, run_command
from damagepipe.synthetic import generate_dataset
from damagepipe.util import write_json


@pytest.fixture()
def workspace(tmp_path):
    dataset = tmp_path / "dataset"
    generate_dataset(dataset, n_pairs=2, buildings_per_pair=2, dims=(96, 96), seed=11)
    run_dir = tmp_path / "run"
    config_path = tmp_path / "config.json"
    write_json(
        config_path,
        {
            "dataset_root": str(dataset),
            "run_dir": str(run_dir),
            "candidate_models": ["gemma3:12b"],
            "jury_models": ["gemma3:27b"],
            "mock": {"enabled": True, "seed": 3},
        },
    )
    return config_path, run_dir


class TestParser:
    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_requires_config(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["assess"])

    def test_collects_repeated_overrides(self):
        args = build_parser().parse_args(
            ["assess", "--config", "c.json", "--set", "a=1", "--set", "b=2"]
        )
        assert args.overrides == ["a=1", "b=2"]


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        status = run_command(["assess", "--config", str(tmp_path / "absent.json")])
        assert status == ExitStatus.CONFIG_ERROR
        assert "config error" in capsys.readouterr().err

    def test_malformed_config_file(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        assert run_command(["assess", "--config", str(path)]) == ExitStatus.CONFIG_ERROR

    def test_unknown_override_key_is_named(self, workspace, capsys):
        config_path, _ = workspace
        status = run_command(
            ["assess", "--config", str(config_path), "--set", "crop.paddin=0.5"]
        )
        assert status == ExitStatus.CONFIG_ERROR
        assert "crop.paddin" in capsys.readouterr().err

    def test_metrics_before_assess(self, workspace, capsys):
        config_path, _ = workspace
        status = run_command(["metrics", "--config", str(config_path)])
        assert status == ExitStatus.CONFIG_ERROR
        assert "no assessments found" in capsys.readouterr().err

    def test_report_without_any_inputs(self, workspace, capsys):
        config_path, run_dir = workspace
        run_dir.mkdir()
        status = run_command(["report", "--config", str(config_path)])
        assert status == ExitStatus.CONFIG_ERROR

    def test_missing_endpoint_without_mock(self, workspace, capsys):
        config_path, _ = workspace
        status = run_command(
            ["assess", "--config", str(config_path), "--set", "mock.enabled=false"]
        )
        assert status == ExitStatus.CONFIG_ERROR
        assert "endpoints.chat" in capsys.readouterr().err


class TestPipeline:
    def test_full_chain_over_mock(self, workspace, capsys):
        config_path, run_dir = workspace
        for command in ("assess", "eval-clip", "eval-jury", "metrics", "report"):
            status = run_command([command, "--config", str(config_path)])
            assert status == ExitStatus.SUCCESS, f"{command} exited {status}"
        out = capsys.readouterr().out
        assert "assess gemma3:12b" in out
        assert "report: wrote" in out

        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["run_id"] == "run"
        assert "created_at" in manifest
        assert (run_dir / "clip_report.json").exists()
        assert (run_dir / "jury_report.json").exists()
        assert (run_dir / "metrics_report.json").exists()
        assert (run_dir / "report" / "metrics.txt").exists()

    def test_assess_rerun_keeps_manifest_bytes(self, workspace):
        config_path, run_dir = workspace
        assert run_command(["assess", "--config", str(config_path)]) == ExitStatus.SUCCESS
        before = (run_dir / "manifest.json").read_bytes()
        assert run_command(["assess", "--config", str(config_path)]) == ExitStatus.SUCCESS
        assert (run_dir / "manifest.json").read_bytes() == before

    def test_report_rerun_is_byte_identical(self, workspace):
        config_path, run_dir = workspace
        for command in ("assess", "eval-clip", "metrics"):
            assert run_command([command, "--config", str(config_path)]) == ExitStatus.SUCCESS
        assert run_command(["report", "--config", str(config_path)]) == ExitStatus.SUCCESS
        report_dir = run_dir / "report"
        before = {p.name: p.read_bytes() for p in report_dir.iterdir()}
        assert run_command(["report", "--config", str(config_path)]) == ExitStatus.SUCCESS
        after = {p.name: p.read_bytes() for p in report_dir.iterdir()}
        assert before == after

    def test_run_dir_env_override(self, workspace, monkeypatch, tmp_path):
        config_path, configured_run_dir = workspace
        other = tmp_path / "elsewhere"
        monkeypatch.setenv("DAMAGEPIPE_RUN_DIR", str(other))
        assert run_command(["assess", "--config", str(config_path)]) == ExitStatus.SUCCESS
        assert (other / "manifest.json").exists()
        assert not configured_run_dir.exists()
