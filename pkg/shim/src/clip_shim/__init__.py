"""HTTP serving shim exposing CLIP tokenize/embed behind the pipeline's wire protocol."""

from .backends import BackendResolutionError, BadRequestError, ClipEncoder, HashedEncoder
from .config import ShimConfig, ShimConfigError, parse_args
from .server import ShimServer, create_server, main

__all__ = [
    "BackendResolutionError",
    "BadRequestError",
    "ClipEncoder",
    "HashedEncoder",
    "ShimConfig",
    "ShimConfigError",
    "ShimServer",
    "create_server",
    "main",
    "parse_args",
]
