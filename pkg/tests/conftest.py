import numpy as np
import pytest

from singclone.corpus import SyntheticVoices, compute_stats, normalize
from singclone.synthnet import ModelConfig, build_model
from singclone.trainer import Example, TrainConfig, multispeaker_partition, train

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def voices():
    return SyntheticVoices.create(0, 9)


@pytest.fixture(scope="session")
def small_corpus(voices):
    """Four training voices with eight pseudo utterances each, normalized."""
    raw = [u for s in range(4) for u in voices.utterances(s, "pseudo", 0, 8)]
    stats = compute_stats([u.acoustics for u in raw])
    return normalize(raw, stats), stats


@pytest.fixture(scope="session")
def small_base(small_corpus):
    """A briefly trained four-voice model (double precision, small channels)."""
    utts, _ = small_corpus
    params = build_model(ModelConfig(residual_channels=16, skip_channels=12), 4, 0)
    dataset = [Example(u.controls, u.acoustics, u.speaker) for u in utts]
    cfg = TrainConfig(iterations=60, batch_chunks=4, seed=0)
    return train(dataset, params, multispeaker_partition(params), cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
