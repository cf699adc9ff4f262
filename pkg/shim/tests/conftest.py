"""Shared fixtures: a running shim with the checkpoint-free encoder."""

import threading

import pytest

from clip_shim import ShimConfig, create_server


@pytest.fixture(scope="session")
def shim_server():
    config = ShimConfig(
        clip_model="hashed-512",
        sr_backend="nearest",
        capabilities=("tokenize", "embed", "upscale"),
    )
    server = create_server(config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()
    thread.join(timeout=5)


@pytest.fixture(scope="session")
def base_url(shim_server):
    host, port = shim_server.server_address[:2]
    return f"http://{host}:{port}"
