"""Shared pytest fixtures for commonloc tests."""

import shutil
import tempfile
import uuid
from pathlib import Path

import pytest

from commonloc.config import RunConfig, load_config
from commonloc.models import AnnotatedVideo, Instance, TemporalSegment

# Small enough for CPU unit tests; every module is still on.
TINY_OVERRIDES = {
    "model.channels": 16,
    "model.input_channels": 16,
    "anchors.scales": [16, 32, 64, 128],
    "proposals.train_count": 32,
    "proposals.eval_count": 64,
    "proposals.min_keep": 8,
    "synthetic.num_frames": 256,
    "synthetic.gt_steps_min": 4,
    "synthetic.gt_steps_max": 10,
    "synthetic.support_steps_min": 4,
    "synthetic.support_steps_max": 8,
    "train.iterations": 6,
    "train.decay_iteration": 4,
    "train.num_supports": 3,
    "train.log_every": 0,
    "eval.episodes": 3,
}


@pytest.fixture
def isolated_tmp_dir(request):
    """Create isolated temp directory for parallel test safety."""
    temp_dir = tempfile.mkdtemp(prefix=f"commonloc-test-{uuid.uuid4().hex[:8]}-")
    yield Path(temp_dir)
    # Cleanup unless --keep-artifacts flag set
    if not request.config.getoption("--keep-artifacts", default=False):
        shutil.rmtree(temp_dir, ignore_errors=True)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    """A RunConfig that trains and infers in well under a second per episode."""
    return load_config(overrides=dict(TINY_OVERRIDES))


def make_video(video_id: str, num_frames: int, *instances: tuple[str, float, float], fps: float = 30.0) -> AnnotatedVideo:
    return AnnotatedVideo(
        video_id,
        num_frames,
        fps,
        tuple(Instance(label, TemporalSegment(start, end)) for label, start, end in instances),
    )


@pytest.fixture
def video_factory():
    """Build AnnotatedVideo values from (label, start, end) tuples."""
    return make_video


def pytest_addoption(parser):
    """Add custom command-line options."""
    parser.addoption(
        "--keep-artifacts",
        action="store_true",
        help="Keep test artifacts on failure for debugging"
    )
    parser.addoption(
        "--run-slow",
        action="store_true",
        help="Run end-to-end training tests (minutes on CPU)"
    )


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line("markers", "unit: Unit tests (fast, no external deps)")
    config.addinivalue_line("markers", "slow: End-to-end training runs")


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless --run-slow is passed."""
    if not config.getoption("--run-slow"):
        skip_slow = pytest.mark.skip(reason="need --run-slow option to run")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip_slow)
