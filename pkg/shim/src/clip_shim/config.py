"""Startup configuration for the serving shim."""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field

KNOWN_CAPABILITIES = ("tokenize", "embed", "upscale", "detect")
DEFAULT_CAPABILITIES = ("tokenize", "embed")
DEFAULT_CLIP_MODEL = "ViT-B/32"

# Fallback identifier: a content-addressed pseudo-encoder that needs no
# checkpoint. It honors every wire and shape contract but carries no semantic
# structure, so scores computed against it are only good for plumbing tests.
HASHED_ENCODER = "hashed-512"

SR_BACKENDS = ("nearest", "bicubic")


class ShimConfigError(ValueError):
    """Invalid or inconsistent startup configuration."""


@dataclass(frozen=True)
class ShimConfig:
    """Validated server settings; encoder resolution happens at startup."""

    host: str = "127.0.0.1"
    port: int = 0
    clip_model: str = DEFAULT_CLIP_MODEL
    sr_backend: str | None = None
    detector_backend: str | None = None
    device: str = "cpu"
    capabilities: tuple[str, ...] = field(default=DEFAULT_CAPABILITIES)

    def __post_init__(self) -> None:
        if not (0 <= self.port <= 65535):
            raise ShimConfigError(f"port must be in [0, 65535], got {self.port}")
        if not self.capabilities:
            raise ShimConfigError("at least one capability must be enabled")
        unknown = [c for c in self.capabilities if c not in KNOWN_CAPABILITIES]
        if unknown:
            raise ShimConfigError(
                f"unknown capabilities {unknown}; known: {', '.join(KNOWN_CAPABILITIES)}"
            )
        if len(set(self.capabilities)) != len(self.capabilities):
            raise ShimConfigError(f"duplicate capabilities in {self.capabilities}")
        if not self.clip_model:
            raise ShimConfigError("clip_model must be non-empty")
        if "upscale" in self.capabilities and self.sr_backend is None:
            raise ShimConfigError("the upscale capability requires --sr-backend")
        if self.sr_backend is not None and self.sr_backend not in SR_BACKENDS:
            raise ShimConfigError(
                f"unknown sr backend {self.sr_backend!r}; known: {', '.join(SR_BACKENDS)}"
            )
        if "detect" in self.capabilities and self.detector_backend is None:
            raise ShimConfigError("the detect capability requires --detector-backend")


def parse_args(argv: list[str] | None = None) -> ShimConfig:
    parser = argparse.ArgumentParser(
        prog="clip-shim",
        description="Serve CLIP tokenize/embed (and optional upscale/detect backends) over HTTP.",
    )
    parser.add_argument("--host", default="127.0.0.1", help="bind address (default 127.0.0.1)")
    parser.add_argument("--port", type=int, default=8090, help="bind port (default 8090; 0 = ephemeral)")
    parser.add_argument(
        "--clip-model",
        default=DEFAULT_CLIP_MODEL,
        help=(
            f"checkpoint identifier or local path (default {DEFAULT_CLIP_MODEL}); "
            f"'{HASHED_ENCODER}' selects the checkpoint-free pseudo-encoder"
        ),
    )
    parser.add_argument(
        "--sr-backend",
        default=None,
        choices=SR_BACKENDS,
        help="interpolation backend enabling the upscale capability",
    )
    parser.add_argument(
        "--detector-backend",
        default=None,
        metavar="WEIGHTS",
        help="detector weights path enabling the detect capability",
    )
    parser.add_argument("--device", default="cpu", help="compute device (default cpu)")
    parser.add_argument(
        "--capabilities",
        default=",".join(DEFAULT_CAPABILITIES),
        help=f"comma-separated subset of {','.join(KNOWN_CAPABILITIES)}",
    )
    args = parser.parse_args(argv)
    capabilities = tuple(part.strip() for part in args.capabilities.split(",") if part.strip())
    try:
        return ShimConfig(
            host=args.host,
            port=args.port,
            clip_model=args.clip_model,
            sr_backend=args.sr_backend,
            detector_backend=args.detector_backend,
            device=args.device,
            capabilities=capabilities,
        )
    except ShimConfigError as exc:
        parser.error(str(exc))
        raise AssertionError("unreachable")  # parser.error always exits
