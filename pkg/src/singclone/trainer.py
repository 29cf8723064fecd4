"""Training loop, speaker adaptation and parameter averaging."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ContractError, DimensionError, EmptyInputError, NumericError
from .speakerspace import (
    AdaptationMode,
    EmbeddingOnly,
    JointFinetune,
    Sequential,
    add_speaker,
    embedding_name,
    is_embedding_name,
    trainable_partition,
)
from .synthnet import ModelParams, forward_graph, previous_frames

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    iterations: int = 2000
    batch_frames: int = 96
    batch_chunks: int = 8
    seed: int = 0
    polyak_decay: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: str = "double"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_frames < 1 or self.batch_chunks < 1:
            raise ConfigError("batch_frames and batch_chunks must be >= 1")
        if self.polyak_decay is not None and not 0.0 < self.polyak_decay < 1.0:
            raise ConfigError("polyak_decay must lie in (0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision must be 'single' or 'double'")

    @classmethod
    def multispeaker(cls, **kw) -> "TrainConfig":
        return cls(**{"learning_rate": 3e-4, "iterations": 2000, **kw})

    @classmethod
    def scratch(cls, **kw) -> "TrainConfig":
        return cls(**{"learning_rate": 5e-4, "iterations": 600, **kw})

    @classmethod
    def adaptation(cls, **kw) -> "TrainConfig":
        return cls(**{"learning_rate": 3e-4, "iterations": 200, "polyak_decay": 0.999, **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**d)


class Example(NamedTuple):
    """One training utterance: controls, target acoustics and an embedding row."""

    controls: np.ndarray
    acoustics: np.ndarray
    speaker: int


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig | None = None
    iteration: int = 0
    rng_state: dict | None = None
    optimizer: AdamState | None = None
    averaged: dict[str, np.ndarray] | None = None
    loss_log: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metadata: dict = field(default_factory=dict)

    def eval_params(self) -> ModelParams:
        """Parameters used for evaluation: the averaged set when one exists."""
        if not self.averaged:
            return self.params
        out = self.params.copy()
        for name, value in self.averaged.items():
            out.set(name, value)
        return out


def polyak_update(avg: Mapping[str, np.ndarray], current: Mapping[str, np.ndarray],
                  decay: float) -> dict[str, np.ndarray]:
    """Exponential moving average: ``decay * avg + (1 - decay) * current``."""
    if not 0.0 < decay < 1.0:
        raise ConfigError("decay must lie in (0, 1)")
    if set(avg) != set(current):
        raise DimensionError("averaged and current parameter sets have different names")
    out = {}
    for name, a in avg.items():
        c = current[name]
        if a.shape != c.shape:
            raise DimensionError(f"{name}: shape {a.shape} != {c.shape}")
        # coordinates that already agree stay bit-identical (exact fixed point)
        out[name] = np.where(a == c, a, decay * a + (1.0 - decay) * c)
    return out


def averaging_decay(decay: float, step: int) -> float:
    """Decay used at update ``step`` (1-based): ramps up so early steps are not swamped by the init."""
    return min(decay, (1.0 + step) / (10.0 + step))


def _sample_batch(rng: np.random.Generator, dataset: Sequence[Example], chunk: int, n_chunks: int):
    picks = rng.integers(len(dataset), size=n_chunks)
    ctrl, ac, prev, rows = [], [], [], []
    for i in picks:
        ex = dataset[i]
        T = ex.acoustics.shape[0]
        start = int(rng.integers(0, T - chunk + 1))
        ctrl.append(ex.controls[start:start + chunk])
        ac.append(ex.acoustics[start:start + chunk])
        # feed the true previous frame even when the chunk starts mid-utterance
        before = ex.acoustics[start - 1] if start > 0 else np.zeros(ex.acoustics.shape[1])
        prev.append(np.concatenate([before[None], ex.acoustics[start:start + chunk - 1]]))
        rows.append(int(ex.speaker))
    return np.stack(ctrl), np.stack(ac), np.stack(prev), rows


def batch_loss(params: ModelParams, trainable: frozenset[str], controls: np.ndarray, acoustics: np.ndarray,
               prev: np.ndarray, rows: Sequence[int]) -> tuple[gc.Tensor, dict[str, gc.Tensor]]:
    """Build the teacher-forced L1 loss for a batch on a fresh tape.

    Returns the loss node and the parameter leaves keyed by name.
    """
    dtype = params.config.dtype
    leaves: dict[str, gc.Tensor] = {}
    for name, value in params.weights.items():
        leaves[name] = gc.parameter(value, name) if name in trainable else gc.constant(value)
    row_nodes = {}
    for r in sorted(set(rows)):
        name = embedding_name(r)
        vec = params.get(name)
        row_nodes[r] = gc.parameter(vec, name) if name in trainable else gc.constant(vec)
        leaves[name] = row_nodes[r]
    emb = gc.repeat_frames(gc.stack([row_nodes[r] for r in rows]), controls.shape[-2])
    conditioned = gc.concat_channels([gc.constant(controls.astype(dtype, copy=False)), emb])
    pred = forward_graph(leaves, params.config, prev.astype(dtype, copy=False), conditioned)
    loss = gc.l1_loss(pred, gc.constant(acoustics.astype(dtype, copy=False)))
    return loss, leaves


def _validate_dataset(dataset: Sequence[Example], params: ModelParams):
    if len(dataset) == 0:
        raise EmptyInputError("training set is empty")
    cfg = params.config
    for ex in dataset:
        if ex.controls.shape[0] != ex.acoustics.shape[0] or ex.controls.shape[0] == 0:
            raise DimensionError("each example needs equal, non-zero frame counts")
        if ex.controls.shape[1] != cfg.control_dim or ex.acoustics.shape[1] != cfg.acoustic_dim:
            raise DimensionError("example feature widths do not match the model configuration")
        if not 0 <= ex.speaker < params.embeddings.n_speakers:
            raise ContractError(f"example speaker {ex.speaker} has no embedding row")


def train(dataset: Sequence[Example], params: ModelParams, trainable, config: TrainConfig, *,
          validation: Callable[[ModelParams], float] | None = None, validate_every: int = 50,
          patience: int | None = None, metadata: Mapping | None = None) -> Checkpoint:
    """Run ``config.iterations`` Adam updates on random frame chunks.

    Only parameters named in ``trainable`` change; ``params`` itself is left
    untouched. ``validation``/``patience`` enable optional early stopping on
    a held-out score (lower is better); it is off by default.
    """
    trainable = frozenset(trainable)
    if not trainable:
        raise ContractError("trainable parameter set is empty")
    unknown = trainable - set(params.names())
    if unknown:
        raise ContractError(f"unknown trainable parameters: {sorted(unknown)}")
    _validate_dataset(dataset, params)
    params = params.copy()
    dtype = params.config.dtype
    chunk = min(config.batch_frames, min(ex.acoustics.shape[0] for ex in dataset))
    rng = np.random.default_rng(config.seed)
    names = sorted(trainable)
    opt = AdamState(0, {n: np.zeros_like(params.get(n), dtype=np.float64) for n in names},
                    {n: np.zeros_like(params.get(n), dtype=np.float64) for n in names})
    averaged = {n: params.get(n).copy() for n in names} if config.polyak_decay else None
    losses = np.empty(config.iterations)
    best, best_params, bad_evals = np.inf, None, 0
    done = 0

    for it in range(config.iterations):
        controls, acoustics, prev, rows = _sample_batch(rng, dataset, chunk, config.batch_chunks)
        loss, leaves = batch_loss(params, trainable, controls, acoustics, prev, rows)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericError(f"loss diverged at iteration {it}: {value}")
        gc.backward(loss)

        opt.step += 1
        b1, b2 = config.beta1, config.beta2
        lr_t = config.learning_rate * np.sqrt(1.0 - b2 ** opt.step) / (1.0 - b1 ** opt.step)
        for n in names:
            node = leaves.get(n)
            g = node.grad if node is not None and node.grad is not None else 0.0
            opt.m[n] = b1 * opt.m[n] + (1.0 - b1) * g
            opt.v[n] = b2 * opt.v[n] + (1.0 - b2) * np.square(g)
            update = lr_t * opt.m[n] / (np.sqrt(opt.v[n]) + config.eps)
            params.set(n, (params.get(n) - update).astype(dtype))
        if averaged is not None:
            averaged = polyak_update(averaged, {n: params.get(n) for n in names},
                                     averaging_decay(config.polyak_decay, opt.step))
        losses[it] = value
        done = it + 1

        if validation is not None and patience is not None and done % validate_every == 0:
            current = _with_average(params, averaged)
            score = validation(current)
            if score < best:
                best, best_params, bad_evals = score, current.copy(), 0
            else:
                bad_evals += 1
                if bad_evals >= patience:
                    log.info("early stop at iteration %d (best validation %.5f)", done, best)
                    params = best_params
                    averaged = None
                    break

    return Checkpoint(
        params=params,
        train_config=config,
        iteration=done,
        rng_state=rng.bit_generator.state,
        optimizer=opt,
        averaged=averaged,
        loss_log=losses[:done].copy(),
        metadata=dict(metadata or {}),
    )


def _with_average(params: ModelParams, averaged):
    if not averaged:
        return params
    out = params.copy()
    for n, v in averaged.items():
        out.set(n, v)
    return out


def adapt(base: Checkpoint, target_utts: Sequence, mode: AdaptationMode, config: TrainConfig,
          metadata: Mapping | None = None) -> Checkpoint:
    """Add a speaker row to ``base`` and train on the target's utterances.

    ``target_utts`` need ``controls`` and ``acoustics``. The returned
    checkpoint records the new row under ``metadata['target_row']``.
    """
    if len(target_utts) == 0:
        raise EmptyInputError("no adaptation utterances")
    params = base.eval_params().copy()
    params.embeddings, target = add_speaker(params.embeddings, config.seed)
    dataset = [Example(u.controls, u.acoustics, target) for u in target_utts]
    meta = {**(metadata or {}), "target_row": target, "mode": mode.name}

    if isinstance(mode, Sequential):
        phase1 = train(dataset, params, trainable_partition(params, mode, target, 1),
                       replace(config, iterations=mode.embedding_iters), metadata=meta)
        phase2 = train(dataset, phase1.eval_params(), trainable_partition(params, mode, target, 2),
                       replace(config, iterations=mode.joint_iters, seed=config.seed + 1),
                       metadata={**meta, "phase1_iterations": phase1.iteration})
        phase2.loss_log = np.concatenate([phase1.loss_log, phase2.loss_log])
        return phase2
    if not isinstance(mode, (EmbeddingOnly, JointFinetune)):
        raise ConfigError(f"unknown adaptation mode {mode!r}")
    return train(dataset, params, trainable_partition(params, mode, target), config, metadata=meta)


def multispeaker_partition(params: ModelParams) -> frozenset[str]:
    """Everything is trained when building the multispeaker model."""
    return frozenset(params.names())


def smoothed(losses: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    c = np.cumsum(np.insert(np.asarray(losses, dtype=np.float64), 0, 0.0))
    idx = np.arange(1, len(losses) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def weight_names(params: ModelParams) -> list[str]:
    return [n for n in params.names() if not is_embedding_name(n)]
