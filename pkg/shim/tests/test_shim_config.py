"""Startup configuration validation and CLI argument parsing."""

import pytest

from clip_shim import ShimConfig, ShimConfigError, parse_args


class TestShimConfig:
    def test_defaults(self):
        config = ShimConfig()
        assert config.clip_model == "ViT-B/32"
        assert config.capabilities == ("tokenize", "embed")
        assert config.device == "cpu"
        assert config.sr_backend is None and config.detector_backend is None

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"port": -1},
            {"port": 70000},
            {"capabilities": ()},
            {"capabilities": ("tokenize", "levitate")},
            {"capabilities": ("embed", "embed")},
            {"clip_model": ""},
            {"capabilities": ("tokenize", "embed", "upscale")},  # no sr backend
            {"capabilities": ("tokenize", "embed", "detect")},  # no detector
            {"sr_backend": "fractal"},
        ],
    )
    def test_invalid_settings_rejected(self, kwargs):
        with pytest.raises(ShimConfigError):
            ShimConfig(**kwargs)

    def test_upscale_with_backend_is_valid(self):
        config = ShimConfig(sr_backend="bicubic", capabilities=("tokenize", "embed", "upscale"))
        assert "upscale" in config.capabilities


class TestParseArgs:
    def test_defaults(self):
        config = parse_args([])
        assert config.host == "127.0.0.1"
        assert config.port == 8090
        assert config.capabilities == ("tokenize", "embed")

    def test_capabilities_flag(self):
        config = parse_args(
            ["--capabilities", "tokenize,embed,upscale", "--sr-backend", "nearest", "--port", "0"]
        )
        assert config.capabilities == ("tokenize", "embed", "upscale")
        assert config.sr_backend == "nearest"

    def test_whitespace_in_capabilities_tolerated(self):
        config = parse_args(["--capabilities", "tokenize, embed"])
        assert config.capabilities == ("tokenize", "embed")

    def test_inconsistent_flags_exit_with_usage_error(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            parse_args(["--capabilities", "tokenize,embed,detect"])
        assert excinfo.value.code == 2
        assert "--detector-backend" in capsys.readouterr().err

    def test_custom_model_and_device(self):
        config = parse_args(["--clip-model", "/weights/clip", "--device", "cuda:0"])
        assert config.clip_model == "/weights/clip"
        assert config.device == "cuda:0"
