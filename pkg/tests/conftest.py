"""Shared test fixtures; helper builders live in support.py."""

from pathlib import Path

import pytest

from support import MockRun, build_mock_run, square_feature, write_label, write_png


@pytest.fixture
def pair_dir(tmp_path: Path) -> Path:
    """A directory with one complete pre/post pair and post labels."""
    write_png(tmp_path / "moore-tornado_00000001_pre_disaster.png", 16, 16)
    write_png(tmp_path / "moore-tornado_00000001_post_disaster.png", 16, 16)
    write_label(
        tmp_path / "moore-tornado_00000001_post_disaster.json",
        [square_feature(2, 2, 5, subtype="destroyed")],
        gsd=0.5,
    )
    return tmp_path


@pytest.fixture(scope="session")
def mock_run(tmp_path_factory) -> MockRun:
    """Session-wide completed run; tests must not mutate its artifacts."""
    return build_mock_run(tmp_path_factory.mktemp("mockrun"))
