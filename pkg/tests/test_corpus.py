import numpy as np
import pytest

from singclone import corpus as cp
from singclone.errors import ConfigError, CorruptionError, DimensionError, FormatError
from singclone.evalkit import SimilarityOracle, classify_speaker


class TestRender:
    def test_pseudo_pitch_constant(self, voices):
        for i in range(10):
            u = voices.utterance(1, "pseudo", i)
            assert np.var(u.pitch) == 0.0
            assert u.pitch[0] in cp.PITCH_LEVELS

    def test_natural_pitch_varies(self, voices):
        for i in range(10):
            assert np.var(voices.utterance(1, "natural", i).pitch) > 0.0

    def test_one_hot_rows(self, voices):
        for style in cp.STYLES:
            u = voices.utterance(0, style, 0)
            np.testing.assert_array_equal(u.controls[:, : cp.N_PHONEMES].sum(axis=1), 1.0)
            assert u.controls.shape[0] == u.acoustics.shape[0]

    def test_memoryless_oracle_is_deterministic_per_frame(self, voices):
        oracle = voices.oracle
        c = np.zeros((2, cp.CONTROL_DIM))
        c[:, 3] = 1.0
        c[:, cp.N_PHONEMES] = 0.5
        x = oracle.render(c, voices.latents[0], alpha=0.0, sigma=0.0)
        assert x[0].tobytes() == x[1].tobytes()

    def test_speakers_differ_on_same_controls(self, voices):
        u = voices.utterance(0, "pseudo", 0)
        a = voices.oracle.render(u.controls, voices.latents[0], np.random.default_rng(5))
        b = voices.oracle.render(u.controls, voices.latents[1], np.random.default_rng(5))
        # direct evaluation of the formula for both latents
        static = lambda z: np.tanh(u.controls @ voices.oracle.w_control.T + voices.oracle.w_latent @ z + voices.oracle.bias)
        assert np.mean(np.linalg.norm(a - b, axis=1)) > 0
        assert np.any(static(voices.latents[0]) != static(voices.latents[1]))

    def test_render_matches_recursion(self, voices):
        u = voices.utterance(2, "pseudo", 0)
        o = voices.oracle
        x = o.render(u.controls, voices.latents[2], sigma=0.0)
        prev = np.zeros(cp.ACOUSTIC_DIM)
        for t in range(5):
            prev = np.tanh(o.w_control @ u.controls[t] + o.w_latent @ voices.latents[2] + o.bias) + o.alpha * prev
            np.testing.assert_allclose(x[t], prev, atol=1e-12)

    def test_bad_style(self, voices):
        with pytest.raises(ConfigError):
            cp.render_utterance(voices.oracle, voices.latents[0], "opera", np.random.default_rng(0))

    def test_autoregressive_ground_truth(self, voices):
        # with alpha > 0, x_t tracks x_{t-1} beyond what c_t explains
        u = voices.utterance(3, "pseudo", 0)
        o = voices.oracle
        with_ar = o.render(u.controls, voices.latents[3], sigma=0.0)
        memoryless = o.render(u.controls, voices.latents[3], alpha=0.0, sigma=0.0)
        residual = with_ar - memoryless
        np.testing.assert_allclose(residual[1:], o.alpha * with_ar[:-1], atol=1e-12)
        assert np.max(np.abs(residual)) > 0.1


class TestCorpusFiles:
    def test_counts_and_manifest(self, tmp_path):
        req = cp.CorpusRequest(n_speakers=8, utts_per_speaker=40)
        manifest = cp.generate_corpus(req, 7, tmp_path)
        files = sorted(tmp_path.glob("*/*.svcu"))
        assert len(files) == 320
        assert manifest.n_speakers * manifest.utts_per_speaker == 320
        loaded = cp.load_manifest(tmp_path)
        assert loaded == manifest
        _, utts = cp.load_corpus(tmp_path)
        assert sum(u.n_frames for us in utts.values() for u in us) == manifest.total_frames

    def test_reproducible(self, tmp_path):
        req = cp.CorpusRequest(n_speakers=3, utts_per_speaker=5, style="natural", n_heldout=1, eval_per_speaker=2)
        cp.generate_corpus(req, 11, tmp_path / "a")
        cp.generate_corpus(req, 11, tmp_path / "b")
        for fa in sorted((tmp_path / "a").rglob("*")):
            fb = tmp_path / "b" / fa.relative_to(tmp_path / "a")
            if fa.is_file():
                assert fa.read_bytes() == fb.read_bytes()

    def test_disk_matches_memory(self, tmp_path):
        req = cp.CorpusRequest(n_speakers=2, utts_per_speaker=3)
        cp.generate_corpus(req, 4, tmp_path)
        voices = cp.SyntheticVoices.create(4, 2)
        _, utts = cp.load_corpus(tmp_path)
        for s in range(2):
            for i in range(3):
                mem = voices.utterance(s, "pseudo", i)
                assert np.array_equal(mem.acoustics, utts[s][i].acoustics)
                assert np.array_equal(mem.controls, utts[s][i].controls)

    def test_splits(self, tmp_path):
        req = cp.CorpusRequest(n_speakers=5, utts_per_speaker=6, n_heldout=2, eval_per_speaker=2)
        m = cp.generate_corpus(req, 0, tmp_path)
        assert m.splits["train_speakers"] == [0, 1, 2] and m.splits["heldout_speakers"] == [3, 4]
        _, utts = cp.load_corpus(tmp_path)
        train, evals = cp.split_utterances(m, utts)
        assert all(len(train[s]) == 4 and len(evals[s]) == 2 for s in range(5))
        assert m.eval_indices() == [4, 5]

    def test_invalid_request(self, tmp_path):
        with pytest.raises(ConfigError):
            cp.generate_corpus(cp.CorpusRequest(n_speakers=0), 0, tmp_path)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            cp.generate_corpus(cp.CorpusRequest(n_speakers=1, utts_per_speaker=1), 0, blocker / "corpus")


class TestUtteranceFormat:
    def test_round_trip_bytes(self, voices):
        data = cp.encode_utterance(voices.utterance(0, "natural", 3))
        assert cp.encode_utterance(cp.decode_utterance(data)) == data

    def test_header_layout(self, voices):
        u = voices.utterance(0, "pseudo", 0)
        data = cp.encode_utterance(u)
        assert data[:4] == b"SVCU"
        version, T, C, D = np.frombuffer(data[4:20], dtype="<u4")
        assert (version, T, C, D) == (1, u.n_frames, cp.CONTROL_DIM, cp.ACOUSTIC_DIM)

    def test_bad_magic(self, voices):
        data = bytearray(cp.encode_utterance(voices.utterance(0, "pseudo", 0)))
        data[:4] = b"XXXX"
        with pytest.raises(FormatError):
            cp.decode_utterance(bytes(data))

    def test_truncated(self, voices):
        data = cp.encode_utterance(voices.utterance(0, "pseudo", 0))
        with pytest.raises(CorruptionError):
            cp.decode_utterance(data[:-3])
        with pytest.raises(CorruptionError):
            cp.decode_utterance(data[:10])


def test_rotation_for_twelve_voices():
    rotations = cp.holdout_rotations(12, 4, 2)
    (train_a, held_a), (train_b, held_b) = rotations
    assert len(held_a) == len(held_b) == 4 and not set(held_a) & set(held_b)
    assert len(train_a) == len(train_b) == 8
    for train, held in rotations:
        assert sorted(train + held) == list(range(12))
        assert sorted(cp.voice_part(s) for s in held) == sorted(cp.VOICE_PARTS)
    shared = set(train_a) & set(train_b)
    assert sorted(shared | set(held_a) | set(held_b)) == list(range(12))
    with pytest.raises(ConfigError):
        cp.holdout_rotations(8, 4, 2)


class TestNormalization:
    def test_round_trip(self, rng):
        frames = rng.normal(3.0, 2.0, size=(50, 6))
        stats = cp.compute_stats([frames])
        back = cp.denormalize(cp.normalize_frames(frames, stats), stats)
        assert np.max(np.abs(back - frames)) < 1e-12

    def test_constant_dimension(self, rng):
        frames = rng.normal(size=(30, 3))
        frames[:, 1] = 4.2
        stats = cp.compute_stats([frames])
        assert stats.constant.tolist() == [False, True, False]
        assert np.array_equal(cp.normalize_frames(frames, stats)[:, 1], frames[:, 1])

    def test_training_split_is_standardized(self, voices):
        utts = voices.utterances(0, "pseudo", 0, 10) + voices.utterances(1, "natural", 0, 10)
        stats = cp.compute_stats([u.acoustics for u in utts])
        data = np.concatenate([u.acoustics for u in cp.normalize(utts, stats)])
        assert np.all(np.abs(data.mean(axis=0)) < 1e-6)
        np.testing.assert_allclose(data.std(axis=0), 1.0, atol=1e-6)

    def test_dimension_mismatch(self, rng):
        stats = cp.compute_stats([rng.normal(size=(5, 3))])
        with pytest.raises(DimensionError):
            cp.normalize_frames(np.zeros((2, 4)), stats)
        with pytest.raises(DimensionError):
            cp.denormalize(np.zeros((2, 4)), stats)

    def test_stats_serialize(self, rng):
        stats = cp.compute_stats([rng.normal(size=(5, 3))])
        back = cp.NormalizationStats.from_dict(stats.to_dict())
        assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)


def test_default_corpus_speakers_are_separable():
    voices = cp.SyntheticVoices.create(0, 8)
    utts = {s: voices.utterances(s, "pseudo", 0, 40) for s in range(8)}
    oracle = SimilarityOracle.fit({s: [u.acoustics for u in us] for s, us in utts.items()})
    hits = total = 0
    for s, us in utts.items():
        result = classify_speaker(oracle, [u.acoustics for u in us])
        hits += sum(p == s for p in result.predicted)
        total += len(us)
    assert hits / total >= 0.95
