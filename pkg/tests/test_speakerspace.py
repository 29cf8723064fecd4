import numpy as np
import pytest

from singclone.errors import ConfigError, SpeakerIdError
from singclone.speakerspace import (
    EmbeddingOnly,
    EmbeddingTable,
    JointFinetune,
    Sequential,
    add_speaker,
    embedding_name,
    parse_mode,
    trainable_partition,
)
from singclone.synthnet import ModelConfig, build_model, condition, generate


def test_add_speaker_appends():
    table = EmbeddingTable.initialize(8, 16, np.random.default_rng(0))
    grown, new_id = add_speaker(table, seed=3)
    assert grown.n_speakers == 9 and new_id == 8
    assert grown.rows[:8].tobytes() == table.rows.tobytes()
    assert np.all(np.abs(grown.rows[8]) <= 0.1)


def test_added_rows_cover_init_range():
    table = EmbeddingTable(np.zeros((0, 16)))
    for seed in range(1000):
        table, _ = add_speaker(table, seed)
    assert table.n_speakers == 1000
    assert table.rows.min() >= -0.1 and table.rows.max() <= 0.1
    assert table.rows.min() < -0.09 and table.rows.max() > 0.09


class TestPartition:
    @pytest.fixture
    def params(self):
        return build_model(ModelConfig(residual_channels=8, skip_channels=8), 3, 0)

    def test_embedding_only(self, params):
        assert trainable_partition(params, EmbeddingOnly(), 2) == {embedding_name(2)}

    def test_joint(self, params):
        part = trainable_partition(params, JointFinetune(), 1)
        assert part == set(params.weight_names()) | {embedding_name(1)}
        assert embedding_name(0) not in part and embedding_name(2) not in part

    def test_sequential_phases(self, params):
        mode = Sequential(1000, 200)
        assert trainable_partition(params, mode, 2, 1) == trainable_partition(params, EmbeddingOnly(), 2)
        assert trainable_partition(params, mode, 2, 2) == trainable_partition(params, JointFinetune(), 2)
        with pytest.raises(ConfigError):
            trainable_partition(params, mode, 2, 3)

    def test_invalid_target(self, params):
        with pytest.raises(SpeakerIdError):
            trainable_partition(params, EmbeddingOnly(), 3)

    def test_sequential_needs_positive_phases(self):
        with pytest.raises(ConfigError):
            Sequential(0, 200)
        with pytest.raises(ConfigError):
            Sequential(100, 0)


def test_parse_mode():
    assert isinstance(parse_mode("embedding-only"), EmbeddingOnly)
    assert isinstance(parse_mode("joint"), JointFinetune)
    assert parse_mode("sequential", 50, 10) == Sequential(50, 10)
    with pytest.raises(ConfigError):
        parse_mode("everything")


def test_existing_speakers_unchanged_by_new_row():
    params = build_model(ModelConfig(residual_channels=8, skip_channels=8), 4, 1)
    controls = np.random.default_rng(1).normal(size=(40, 12))
    before = [generate(params, condition(controls, params.speaker_vector(i))) for i in range(4)]
    params.embeddings, new_id = add_speaker(params.embeddings, 99)
    assert new_id == 4
    for i in range(4):
        after = generate(params, condition(controls, params.speaker_vector(i)))
        assert after.tobytes() == before[i].tobytes()
