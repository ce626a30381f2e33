from __future__ import annotations

import time

import numpy as np
import pytest

from gazeattn.datasets import generate_synthetic, split_by_subject
from gazeattn.model import BackboneConfig, TrainConfig, build_gaze_model, train_gaze

# Filled by tests/test_acceptance.py, printed in the terminal summary.
ACCEPTANCE: list[tuple[str, bool, str]] = []

TINY = BackboneConfig("tiny")
# Momentum and a 10x rate replace the plain-SGD defaults for from-scratch synthetic
# runs: without pretrained weights, lr 0.001 barely moves the loss in 30 epochs.
SYNTH_GAZE_CFG = TrainConfig.gaze_defaults(lr=0.01, momentum=0.9, max_epochs=40)
GAZE_VAL_SUBJECTS = 4
# Wall-clock seconds of the expensive session fixtures, read by the acceptance suite.
TIMINGS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """8 attention subjects x 30 images per class (720) and 20 gaze subjects x 100 images."""
    out = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic(out, subjects=8, per_class=30, seed=0,
                              gaze_subjects=20, gaze_per_subject=100)


@pytest.fixture(scope="session")
def gaze_split(synthetic):
    subjects = synthetic.gaze.subjects
    return split_by_subject(synthetic.gaze, subjects[-GAZE_VAL_SUBJECTS:])


@pytest.fixture(scope="session")
def trained_gaze(gaze_split):
    train, val = gaze_split
    t0 = time.perf_counter()
    ckpt = train_gaze(build_gaze_model(TINY, seed=0), train, val, SYNTH_GAZE_CFG)
    TIMINGS["train_gaze"] = time.perf_counter() - t0
    return ckpt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_attention(synthetic, trained_gaze):
    """Tiny attention model transferred from the synthetic gaze model, trained on all 720 images."""
    from gazeattn.model import transfer_to_attention, train_attention

    model = transfer_to_attention(trained_gaze, seed=0)
    ckpt = train_attention(model, synthetic.attention, TrainConfig.attention_defaults(max_epochs=30))
    return model, ckpt
