"""Synthetic singing corpus with a known ground-truth voice generator.

Every synthetic speaker owns a latent vector ``z``. Acoustic frames follow

    x_t = tanh(W_c c_t + W_z z + b) + alpha * x_{t-1} + sigma * noise

with ``W_c``, ``W_z`` and ``b`` fixed by the corpus seed. Two styles are
rendered: ``pseudo`` (constant pitch at one of three levels, fixed phoneme
durations) and ``natural`` (jittered durations, a smooth pitch contour and a
per-utterance perturbation of the latent).
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, DimensionError, FormatError

N_PHONEMES = 10
CONTROL_DIM = N_PHONEMES + 2  # one-hot, log-pitch, position ramp
ACOUSTIC_DIM = 16
LATENT_DIM = 4
PITCH_LEVELS = (-1.0, 0.0, 1.0)
VOICE_PARTS = ("S", "A", "T", "B")
STYLES = ("pseudo", "natural")

PSEUDO_PHONEME_FRAMES = 8
PSEUDO_PHONEMES = 16
NATURAL_FRAMES = (112, 160)
NATURAL_DURATION = (4, 12)
NATURAL_LATENT_JITTER = 0.25

UTT_MAGIC = b"SVCU"
UTT_VERSION = 1
_UTT_HEADER = struct.Struct("<4sIIII")

MANIFEST_NAME = "manifest.json"

# tags mixed into per-stream seed sequences
_ORACLE_TAG = 0x0AC1E
_LATENT_TAG = 0x1A7E
_STYLE_CODE = {"pseudo": 1, "natural": 2}


def _f32(a: np.ndarray) -> np.ndarray:
    # utterances are stored as float32; keep in-memory values identical to disk
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class VoiceOracle:
    """The fixed generator shared by every speaker in a corpus."""

    w_control: np.ndarray
    w_latent: np.ndarray
    bias: np.ndarray
    alpha: float = 0.3
    sigma: float = 0.05

    @classmethod
    def from_seed(cls, seed: int, alpha: float = 0.3, sigma: float = 0.05,
                  control_dim: int = CONTROL_DIM, acoustic_dim: int = ACOUSTIC_DIM,
                  latent_dim: int = LATENT_DIM) -> "VoiceOracle":
        rng = np.random.default_rng([seed, _ORACLE_TAG])
        w_c = rng.normal(0.0, 0.7, size=(acoustic_dim, control_dim))
        w_z = rng.normal(0.0, 0.5, size=(acoustic_dim, latent_dim))
        b = rng.normal(0.0, 0.2, size=acoustic_dim)
        return cls(w_c, w_z, b, alpha, sigma)

    @property
    def acoustic_dim(self) -> int:
        return self.w_control.shape[0]

    def render(self, controls: np.ndarray, latent: np.ndarray, rng: np.random.Generator | None = None,
               alpha: float | None = None, sigma: float | None = None) -> np.ndarray:
        """Run the recursion over ``controls``; ``latent`` may be one vector or one per frame."""
        alpha = self.alpha if alpha is None else alpha
        sigma = self.sigma if sigma is None else sigma
        latent = np.asarray(latent, dtype=np.float64)
        static = np.tanh(controls @ self.w_control.T + latent @ self.w_latent.T + self.bias)
        T = controls.shape[0]
        if sigma > 0:
            noise = sigma * (rng if rng is not None else np.random.default_rng()).standard_normal((T, self.acoustic_dim))
        else:
            noise = np.zeros((T, self.acoustic_dim))
        out = np.empty((T, self.acoustic_dim))
        prev = np.zeros(self.acoustic_dim)
        for t in range(T):
            prev = static[t] + alpha * prev + noise[t]
            out[t] = prev
        return out


@dataclass
class Utterance:
    controls: np.ndarray
    acoustics: np.ndarray
    speaker: int
    style: str

    def __post_init__(self):
        if self.controls.shape[0] != self.acoustics.shape[0]:
            raise DimensionError("controls and acoustics must have the same frame count")

    @property
    def n_frames(self) -> int:
        return self.controls.shape[0]

    @property
    def pitch(self) -> np.ndarray:
        return self.controls[:, N_PHONEMES]


def _control_frames(phonemes: Sequence[int], durations: Sequence[int], pitch: np.ndarray) -> np.ndarray:
    T = int(np.sum(durations))
    controls = np.zeros((T, CONTROL_DIM))
    t = 0
    for ph, dur in zip(phonemes, durations):
        controls[t:t + dur, ph] = 1.0
        controls[t:t + dur, N_PHONEMES + 1] = np.arange(dur) / dur
        t += dur
    controls[:, N_PHONEMES] = pitch[:T]
    return controls


def _smooth_contour(rng: np.random.Generator, T: int) -> np.ndarray:
    base = rng.uniform(-1.0, 1.0)
    drift = np.cumsum(rng.normal(0.0, 0.03, size=T))
    kernel = np.ones(9) / 9.0
    drift = np.convolve(np.pad(drift, 4, mode="edge"), kernel, mode="valid")
    period = rng.uniform(10.0, 16.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    vibrato = 0.08 * np.sin(2 * np.pi * np.arange(T) / period + phase)
    return base + drift + vibrato


def render_utterance(oracle: VoiceOracle, latent: np.ndarray, style: str, rng: np.random.Generator,
                     speaker: int = 0) -> Utterance:
    """Draw a random phoneme sequence and render it in the given style."""
    if style not in STYLES:
        raise ConfigError(f"style must be one of {STYLES}, got {style!r}")
    latent = np.asarray(latent, dtype=np.float64)
    if style == "pseudo":
        phonemes = rng.integers(0, N_PHONEMES, size=PSEUDO_PHONEMES)
        durations = np.full(PSEUDO_PHONEMES, PSEUDO_PHONEME_FRAMES)
        level = PITCH_LEVELS[rng.integers(len(PITCH_LEVELS))]
        T = int(durations.sum())
        pitch = np.full(T, level)
        z = latent
    else:
        T = int(rng.integers(NATURAL_FRAMES[0], NATURAL_FRAMES[1] + 1))
        durations = []
        while sum(durations) < T:
            durations.append(int(rng.integers(NATURAL_DURATION[0], NATURAL_DURATION[1] + 1)))
        durations[-1] -= sum(durations) - T
        phonemes = rng.integers(0, N_PHONEMES, size=len(durations))
        pitch = _smooth_contour(rng, T)
        z = latent + NATURAL_LATENT_JITTER * rng.standard_normal(latent.shape)
    controls = _f32(_control_frames(phonemes, durations, pitch))
    acoustics = _f32(oracle.render(controls, z, rng))
    return Utterance(controls, acoustics, speaker, style)


@dataclass
class SyntheticVoices:
    """Deterministic source of speakers and utterances for one corpus seed.

    Utterance ``(speaker, style, index)`` is rendered from its own derived
    random stream, so any subset can be produced in any order.
    """

    seed: int
    n_speakers: int
    oracle: VoiceOracle
    latents: np.ndarray

    @classmethod
    def create(cls, seed: int, n_speakers: int, alpha: float = 0.3, sigma: float = 0.05) -> "SyntheticVoices":
        if n_speakers < 1:
            raise ConfigError("need at least one speaker")
        oracle = VoiceOracle.from_seed(seed, alpha=alpha, sigma=sigma)
        latents = np.stack([speaker_latent(seed, s) for s in range(n_speakers)])
        return cls(seed, n_speakers, oracle, latents)

    def utterance(self, speaker: int, style: str, index: int) -> Utterance:
        rng = np.random.default_rng([self.seed, speaker, _STYLE_CODE[style], index])
        return render_utterance(self.oracle, self.latents[speaker], style, rng, speaker=speaker)

    def utterances(self, speaker: int, style: str, start: int, count: int) -> list[Utterance]:
        return [self.utterance(speaker, style, i) for i in range(start, start + count)]


def voice_part(speaker: int) -> str:
    return VOICE_PARTS[speaker % len(VOICE_PARTS)]


def gender_tag(speaker: int) -> str:
    return "F" if voice_part(speaker) in ("S", "A") else "M"


def speaker_latent(seed: int, speaker: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _LATENT_TAG, speaker])
    z = rng.standard_normal(LATENT_DIM)
    # loose clustering by gender-analog tag
    z[0] += 0.5 if gender_tag(speaker) == "F" else -0.5
    return z


def holdout_rotations(n_speakers: int = 12, n_heldout: int = 4, n_rotations: int = 2) -> list[tuple[list[int], list[int]]]:
    """Split speakers into (train, held-out) pairs with disjoint held-out sets.

    Speakers are grouped by voice part and rotation ``r`` holds out the
    ``r``-th member of each part, so every rotation withholds one voice per
    part. Members that are never held out appear in every training set.
    """
    n_parts = len(VOICE_PARTS)
    if n_heldout != n_parts:
        raise ConfigError(f"rotation holds out one voice per part, so n_heldout must be {n_parts}")
    if n_speakers % n_parts or n_speakers // n_parts < n_rotations + 1:
        raise ConfigError(
            f"{n_speakers} speakers cannot support {n_rotations} rotations of {n_heldout} "
            "held-out voices while keeping shared training voices"
        )
    by_part = [[s for s in range(n_speakers) if s % n_parts == p] for p in range(n_parts)]
    out = []
    for r in range(n_rotations):
        held = sorted(members[r] for members in by_part)
        train = [s for s in range(n_speakers) if s not in held]
        out.append((train, held))
    return out


# ---------------------------------------------------------------------------
# utterance files


def encode_utterance(utt: Utterance) -> bytes:
    T, C = utt.controls.shape
    D = utt.acoustics.shape[1]
    header = _UTT_HEADER.pack(UTT_MAGIC, UTT_VERSION, T, C, D)
    return (header + np.ascontiguousarray(utt.controls, dtype="<f4").tobytes()
            + np.ascontiguousarray(utt.acoustics, dtype="<f4").tobytes())


def decode_utterance(data: bytes, speaker: int = -1, style: str = "unknown") -> Utterance:
    if len(data) < _UTT_HEADER.size:
        raise CorruptionError("utterance file shorter than its header")
    magic, version, T, C, D = _UTT_HEADER.unpack_from(data)
    if magic != UTT_MAGIC:
        raise FormatError(f"bad utterance magic {magic!r}")
    if version != UTT_VERSION:
        raise FormatError(f"unsupported utterance version {version}")
    expected = _UTT_HEADER.size + 4 * T * (C + D)
    if len(data) != expected:
        raise CorruptionError(f"utterance payload is {len(data)} bytes, header implies {expected}")
    off = _UTT_HEADER.size
    controls = np.frombuffer(data, dtype="<f4", count=T * C, offset=off).reshape(T, C)
    acoustics = np.frombuffer(data, dtype="<f4", count=T * D, offset=off + 4 * T * C).reshape(T, D)
    return Utterance(controls.astype(np.float64), acoustics.astype(np.float64), speaker, style)


def write_utterance(utt: Utterance, path) -> None:
    Path(path).write_bytes(encode_utterance(utt))


def read_utterance(path, speaker: int = -1, style: str = "unknown") -> Utterance:
    return decode_utterance(Path(path).read_bytes(), speaker, style)


# ---------------------------------------------------------------------------
# corpora on disk


@dataclass
class CorpusRequest:
    n_speakers: int = 8
    utts_per_speaker: int = 40
    style: str = "pseudo"
    n_heldout: int = 0
    eval_per_speaker: int = 0
    alpha: float = 0.3
    sigma: float = 0.05

    def validate(self):
        if self.n_speakers < 1:
            raise ConfigError("n_speakers must be >= 1")
        if self.utts_per_speaker < 1:
            raise ConfigError("utts_per_speaker must be >= 1")
        if self.style not in STYLES:
            raise ConfigError(f"style must be one of {STYLES}")
        if not 0 <= self.n_heldout < self.n_speakers:
            raise ConfigError("n_heldout must leave at least one training speaker")
        if not 0 <= self.eval_per_speaker < self.utts_per_speaker:
            raise ConfigError("eval_per_speaker must leave at least one training utterance")


@dataclass
class DatasetManifest:
    seed: int
    style: str
    n_speakers: int
    utts_per_speaker: int
    speakers: list[dict]
    splits: dict
    pitch_levels: list[float]
    total_frames: int
    control_dim: int = CONTROL_DIM
    acoustic_dim: int = ACOUSTIC_DIM
    latent_dim: int = LATENT_DIM
    alpha: float = 0.3
    sigma: float = 0.05
    frames_per_speaker: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    def latents(self) -> np.ndarray:
        return np.array([s["latent"] for s in self.speakers])

    def eval_indices(self) -> list[int]:
        n = self.splits.get("eval_per_speaker", 0)
        return list(range(self.utts_per_speaker - n, self.utts_per_speaker))


def utterance_path(root, speaker: int, index: int) -> Path:
    return Path(root) / f"{speaker:03d}" / f"{index:04d}.svcu"


def generate_corpus(request: CorpusRequest, seed: int, root) -> DatasetManifest:
    """Render a corpus into ``root`` and write its manifest.

    The last ``n_heldout`` speakers form the adaptation-target split and the
    last ``eval_per_speaker`` utterances of every speaker form its
    evaluation split.
    """
    request.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {root}: {exc}") from exc
    voices = SyntheticVoices.create(seed, request.n_speakers, request.alpha, request.sigma)
    speakers, frames = [], []
    for s in range(request.n_speakers):
        (root / f"{s:03d}").mkdir(exist_ok=True)
        n = 0
        for i in range(request.utts_per_speaker):
            utt = voices.utterance(s, request.style, i)
            write_utterance(utt, utterance_path(root, s, i))
            n += utt.n_frames
        frames.append(n)
        speakers.append({"id": s, "latent": voices.latents[s].tolist(), "part": voice_part(s),
                         "gender": gender_tag(s)})
    n_train = request.n_speakers - request.n_heldout
    manifest = DatasetManifest(
        seed=seed,
        style=request.style,
        n_speakers=request.n_speakers,
        utts_per_speaker=request.utts_per_speaker,
        speakers=speakers,
        splits={
            "train_speakers": list(range(n_train)),
            "heldout_speakers": list(range(n_train, request.n_speakers)),
            "eval_per_speaker": request.eval_per_speaker,
        },
        pitch_levels=list(PITCH_LEVELS),
        total_frames=int(sum(frames)),
        alpha=request.alpha,
        sigma=request.sigma,
        frames_per_speaker=frames,
    )
    (root / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    return DatasetManifest.from_json(path.read_text(encoding="utf-8"))


def load_corpus(root, speakers: Iterable[int] | None = None,
                indices: Iterable[int] | None = None) -> tuple[DatasetManifest, dict[int, list[Utterance]]]:
    manifest = load_manifest(root)
    speakers = range(manifest.n_speakers) if speakers is None else speakers
    out = {}
    for s in speakers:
        idx = range(manifest.utts_per_speaker) if indices is None else indices
        out[s] = [read_utterance(utterance_path(root, s, i), s, manifest.style) for i in idx]
    return manifest, out


def split_utterances(manifest: DatasetManifest, utts: dict[int, list[Utterance]]):
    """Return (train, eval) dicts according to the manifest's per-speaker eval split."""
    n_eval = manifest.splits.get("eval_per_speaker", 0)
    train = {s: u[: len(u) - n_eval] for s, u in utts.items()}
    evals = {s: u[len(u) - n_eval:] for s, u in utts.items()}
    return train, evals


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask of dims passed through untouched

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormalizationStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
                   np.array(d["constant"], dtype=bool))


def compute_stats(frames: Iterable[np.ndarray], eps: float = 1e-12) -> NormalizationStats:
    data = np.concatenate([np.asarray(f, dtype=np.float64) for f in frames], axis=0)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    constant = std <= eps
    return NormalizationStats(np.where(constant, 0.0, mean), np.where(constant, 1.0, std), constant)


def normalize_frames(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.mean.shape[0]:
        raise DimensionError(f"frame width {frames.shape[-1]} != stats width {stats.mean.shape[0]}")
    return (frames - stats.mean) / stats.std


def denormalize(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.mean.shape[0]:
        raise DimensionError(f"frame width {frames.shape[-1]} != stats width {stats.mean.shape[0]}")
    return frames * stats.std + stats.mean


def normalize(utts: Sequence[Utterance], stats: NormalizationStats) -> list[Utterance]:
    return [Utterance(u.controls, normalize_frames(u.acoustics, stats), u.speaker, u.style) for u in utts]
