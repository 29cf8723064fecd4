"""Speaker embedding table and the trainable-parameter partitions used for adaptation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SpeakerIdError

EMBEDDING_PREFIX = "speaker_embedding/"
INIT_RANGE = 0.1


def embedding_name(index: int) -> str:
    return f"{EMBEDDING_PREFIX}{index}"


def is_embedding_name(name: str) -> bool:
    return name.startswith(EMBEDDING_PREFIX)


class EmbeddingTable:
    """N x M matrix of learned speaker vectors; row ``i`` belongs to speaker ``i``."""

    def __init__(self, rows: np.ndarray):
        rows = np.asarray(rows)
        if rows.ndim != 2:
            raise ValueError(f"embedding table must be 2-D, got shape {rows.shape}")
        self.rows = rows

    @classmethod
    def initialize(cls, n_speakers: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        return cls(rng.uniform(-INIT_RANGE, INIT_RANGE, size=(n_speakers, dim)).astype(dtype))

    @property
    def n_speakers(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self):
        return self.n_speakers

    def __getitem__(self, speaker: int) -> np.ndarray:
        return self.rows[check_speaker(self, speaker)]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.rows.copy())


def check_speaker(table: EmbeddingTable, speaker: int) -> int:
    if not (0 <= int(speaker) < table.n_speakers):
        raise SpeakerIdError(f"speaker {speaker} not in table of {table.n_speakers} rows")
    return int(speaker)


def add_speaker(table: EmbeddingTable, seed: int) -> tuple[EmbeddingTable, int]:
    """Append a uniformly initialized row; existing rows are copied unchanged."""
    rng = np.random.default_rng(seed)
    row = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(1, table.dim)).astype(table.rows.dtype)
    return EmbeddingTable(np.concatenate([table.rows, row], axis=0)), table.n_speakers


@dataclass(frozen=True)
class EmbeddingOnly:
    name = "embedding-only"


@dataclass(frozen=True)
class JointFinetune:
    name = "joint"


@dataclass(frozen=True)
class Sequential:
    embedding_iters: int
    joint_iters: int
    name = "sequential"

    def __post_init__(self):
        if self.embedding_iters <= 0 or self.joint_iters <= 0:
            raise ConfigError("Sequential adaptation needs positive iteration counts for both phases")


AdaptationMode = EmbeddingOnly | JointFinetune | Sequential


def parse_mode(text: str, embedding_iters: int = 1000, joint_iters: int = 200) -> AdaptationMode:
    key = text.strip().lower().replace("_", "-")
    if key in ("embedding-only", "embedding"):
        return EmbeddingOnly()
    if key in ("joint", "joint-finetune", "finetune"):
        return JointFinetune()
    if key == "sequential":
        return Sequential(embedding_iters, joint_iters)
    raise ConfigError(f"unknown adaptation mode {text!r}")


def trainable_partition(params, mode: AdaptationMode, target: int, phase: int = 1) -> frozenset[str]:
    """Names of the parameters updated while adapting to ``target``.

    ``params`` is anything with ``names()`` and an ``embeddings`` table.
    Other speakers' embedding rows are never included.
    """
    check_speaker(params.embeddings, target)
    row = frozenset({embedding_name(target)})
    weights = frozenset(n for n in params.names() if not is_embedding_name(n))
    if isinstance(mode, EmbeddingOnly):
        return row
    if isinstance(mode, JointFinetune):
        return weights | row
    if isinstance(mode, Sequential):
        if phase not in (1, 2):
            raise ConfigError(f"sequential adaptation has phases 1 and 2, got {phase}")
        return row if phase == 1 else weights | row
    raise ConfigError(f"unknown adaptation mode {mode!r}")
