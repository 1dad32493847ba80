import pytest

from ckarank.encoder import EncoderConfig, build_encoder
from ckarank.experiments.data import Corruption, SyntheticTaskConfig
from ckarank.experiments.model import SegHead
from ckarank.experiments.training import Backbone

TINY_ENCODER = EncoderConfig(layer_count=3, d_model=16, head_count=2, patch_size=4, image_size=16)
TINY_TASK = SyntheticTaskConfig(image_size=16, seed=3).as_target(Corruption(noise_std=0.05, contrast_jitter=0.5))


@pytest.fixture(scope="session")
def tiny_backbone():
    """Randomly initialised (not pretrained) backbone, enough for plumbing tests."""
    enc = build_encoder(TINY_ENCODER)
    head = SegHead(TINY_ENCODER, seed=1)
    return Backbone(TINY_ENCODER, {k: v.clone() for k, v in enc.state_dict().items()},
                    {k: v.clone() for k, v in head.state_dict().items()}, source_miou=0.0)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
