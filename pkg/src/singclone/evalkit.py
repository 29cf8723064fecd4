"""Objective evaluation: held-out L1 and a nearest-centroid speaker classifier."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .synthnet import ModelParams, condition, generate, teacher_forced_forward

TEACHER_FORCED = "teacher_forced"
FREE_RUNNING = "free_running"


def utterance_statistics(frames: np.ndarray) -> np.ndarray:
    """Per-dimension mean followed by per-dimension std of one utterance."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.concatenate([frames.mean(axis=0), frames.std(axis=0)])


@dataclass
class SimilarityOracle:
    """Speaker centroids of utterance statistics, built from ground truth only."""

    speakers: list[int]
    centroids: np.ndarray
    variance: np.ndarray
    threshold: float

    @classmethod
    def fit(cls, utterances: Mapping[int, Sequence[np.ndarray]], quantile: float = 99.0) -> "SimilarityOracle":
        """``utterances`` maps speaker id to a list of ground-truth acoustic arrays."""
        speakers = sorted(utterances)
        if not speakers:
            raise ContractError("oracle needs at least one speaker")
        feats = {s: np.stack([utterance_statistics(u) for u in utterances[s]]) for s in speakers}
        centroids = np.stack([feats[s].mean(axis=0) for s in speakers])
        resid = np.concatenate([feats[s] - c for s, c in zip(speakers, centroids)])
        variance = np.maximum(resid.var(axis=0), 1e-12)
        oracle = cls(speakers, centroids, variance, np.inf)
        in_class = np.concatenate(
            [oracle.distances(feats[s])[:, i] for i, s in enumerate(speakers)]
        )
        oracle.threshold = float(np.percentile(in_class, quantile))
        return oracle

    def distances(self, feats: np.ndarray) -> np.ndarray:
        diff = feats[:, None, :] - self.centroids[None, :, :]
        return np.sqrt((diff * diff / self.variance).sum(axis=-1))

    def index(self, speaker: int) -> int:
        return self.speakers.index(speaker)


@dataclass
class Classification:
    predicted: list[int]
    votes: dict[int, float]
    distances: np.ndarray
    low_confidence: list[bool]

    def top_speaker(self) -> int:
        return max(self.votes, key=lambda s: (self.votes[s], -s))

    def strictly_top(self, speaker: int) -> bool:
        mine = self.votes.get(speaker, 0.0)
        return all(mine > v for s, v in self.votes.items() if s != speaker)


def classify_speaker(oracle: SimilarityOracle, generated: Sequence[np.ndarray]) -> Classification:
    """Assign each acoustic sequence to the nearest speaker centroid."""
    if len(generated) == 0:
        raise ContractError("classify_speaker needs at least one sequence")
    feats = np.stack([utterance_statistics(g) for g in generated])
    if feats.shape[1] != oracle.centroids.shape[1]:
        raise DimensionError("generated feature width does not match the oracle")
    dist = oracle.distances(feats)
    best = dist.argmin(axis=1)
    predicted = [oracle.speakers[i] for i in best]
    counts = np.bincount(best, minlength=len(oracle.speakers))
    votes = {s: float(c) / len(predicted) for s, c in zip(oracle.speakers, counts)}
    low = [bool(d > oracle.threshold) for d in dist[np.arange(len(best)), best]]
    return Classification(predicted, votes, dist, low)


def _params_of(model) -> ModelParams:
    # accepts ModelParams or anything exposing eval_params() (checkpoints)
    return model.eval_params() if hasattr(model, "eval_params") else model


def predict(model, controls: np.ndarray, speaker: int, mode: str, acoustics: np.ndarray | None = None) -> np.ndarray:
    params = _params_of(model)
    cond = condition(controls, params.speaker_vector(speaker), params.config.embedding_dim)
    if mode == TEACHER_FORCED:
        return teacher_forced_forward(params, acoustics, cond)
    if mode == FREE_RUNNING:
        return generate(params, cond)
    raise ContractError(f"unknown evaluation mode {mode!r}")


def heldout_l1(model, utts: Sequence, speaker: int, mode: str = FREE_RUNNING) -> float:
    """Mean absolute error over frames, dims and utterances.

    ``utts`` carry ``controls`` and ground-truth ``acoustics``; ``speaker``
    is the model's embedding row used for conditioning.
    """
    params = _params_of(model)
    if len(utts) == 0:
        raise ContractError("heldout_l1 needs at least one utterance")
    total, count = 0.0, 0
    for u in utts:
        if u.acoustics.shape[1] != params.config.acoustic_dim or u.controls.shape[1] != params.config.control_dim:
            raise ContractError("utterance dimensions do not match the model configuration")
        pred = predict(params, u.controls, speaker, mode, u.acoustics)
        total += float(np.abs(pred - u.acoustics).sum())
        count += pred.size
    return total / count


def generate_for(model, utts: Sequence, speaker: int) -> list[np.ndarray]:
    """Free-running outputs for each utterance's controls."""
    params = _params_of(model)
    return [predict(params, u.controls, speaker, FREE_RUNNING) for u in utts]
