"""Conditional autoregressive acoustic model.

At step t the network sees ``[x_{t-1}; c_t; s_i]``: the previous acoustic
frame, the control frame and the speaker vector. An initial 1x1 projection
feeds a stack of gated two-tap dilated causal convolutions with plain
residual additions; their skip projections are summed and passed through a
ReLU layer and a linear output layer that predicts ``x_t`` directly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ContractError, DimensionError, EmptyInputError
from .speakerspace import EmbeddingTable, check_speaker, embedding_name, is_embedding_name

DEFAULT_DILATIONS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ModelConfig:
    dilations: tuple[int, ...] = DEFAULT_DILATIONS
    residual_channels: int = 48
    skip_channels: int = 32
    control_dim: int = 12
    acoustic_dim: int = 16
    embedding_dim: int = 16
    precision: str = "double"
    n_layers: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.n_layers is None:
            object.__setattr__(self, "n_layers", len(self.dilations))
        if self.n_layers != len(self.dilations):
            raise ConfigError(f"n_layers={self.n_layers} but {len(self.dilations)} dilations given")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1: {self.dilations}")
        for key in ("residual_channels", "skip_channels", "control_dim", "acoustic_dim", "embedding_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")

    @classmethod
    def multispeaker(cls, **kw) -> "ModelConfig":
        return cls(**{"residual_channels": 48, "skip_channels": 32, **kw})

    @classmethod
    def single_speaker(cls, **kw) -> "ModelConfig":
        return cls(**{"residual_channels": 32, "skip_channels": 16, **kw})

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def conditioned_dim(self) -> int:
        return self.control_dim + self.embedding_dim

    @property
    def input_dim(self) -> int:
        return self.acoustic_dim + self.conditioned_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{**d, "dilations": tuple(d["dilations"])})


def receptive_field(config: ModelConfig) -> int:
    """Number of past acoustic frames that can influence one prediction."""
    return 1 + sum(config.dilations)


def _weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    R, S, D = config.residual_channels, config.skip_channels, config.acoustic_dim
    shapes = {"input_proj/w": (config.input_dim, R), "input_proj/b": (R,)}
    for i in range(config.n_layers):
        shapes[f"layer{i}/filter/w"] = (2, R, R)
        shapes[f"layer{i}/filter/b"] = (R,)
        shapes[f"layer{i}/gate/w"] = (2, R, R)
        shapes[f"layer{i}/gate/b"] = (R,)
        shapes[f"layer{i}/skip/w"] = (R, S)
        shapes[f"layer{i}/skip/b"] = (S,)
    hidden_in = S if config.n_layers else R
    shapes["output/hidden/w"] = (hidden_in, S)
    shapes["output/hidden/b"] = (S,)
    shapes["output/proj/w"] = (S, D)
    shapes["output/proj/b"] = (D,)
    return shapes


@dataclass
class ModelParams:
    """Network weights plus the speaker embedding table, addressable by name."""

    config: ModelConfig
    weights: dict[str, np.ndarray]
    embeddings: EmbeddingTable = field(repr=False)

    def names(self) -> list[str]:
        return list(self.weights) + [embedding_name(i) for i in range(self.embeddings.n_speakers)]

    def weight_names(self) -> list[str]:
        return list(self.weights)

    def get(self, name: str) -> np.ndarray:
        if is_embedding_name(name):
            return self.embeddings.rows[self._row(name)]
        return self.weights[name]

    def set(self, name: str, value: np.ndarray) -> None:
        if is_embedding_name(name):
            self.embeddings.rows[self._row(name)] = value
            return
        if name not in self.weights:
            raise KeyError(name)
        if value.shape != self.weights[name].shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self.weights[name].shape}")
        self.weights[name] = np.array(value, dtype=self.config.dtype, copy=True)

    def _row(self, name: str) -> int:
        try:
            idx = int(name.rsplit("/", 1)[1])
        except ValueError:
            raise KeyError(name) from None
        return check_speaker(self.embeddings, idx)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {n: self.get(n) for n in self.names()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()}, self.embeddings.copy())

    def speaker_vector(self, speaker: int) -> np.ndarray:
        return self.embeddings[speaker]


def build_model(config: ModelConfig, n_speakers: int, seed: int) -> ModelParams:
    """Randomly initialize a model with ``n_speakers`` embedding rows.

    Weights are uniform in +-1/sqrt(fan_in), biases start at zero, and
    embedding rows are uniform in [-0.1, 0.1].
    """
    if n_speakers < 1:
        raise ConfigError("n_speakers must be >= 1")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _weight_shapes(config).items():
        if name.endswith("/b"):
            weights[name] = np.zeros(shape, dtype=config.dtype)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / np.sqrt(fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape).astype(config.dtype)
    table = EmbeddingTable.initialize(n_speakers, config.embedding_dim, rng, config.dtype)
    return ModelParams(config, weights, table)


def condition(controls: np.ndarray, speaker_vec: np.ndarray, embedding_dim: int | None = None) -> np.ndarray:
    """Append the speaker vector to every control frame.

    When ``embedding_dim`` is given the speaker vector length is checked
    against it.
    """
    controls = np.asarray(controls)
    speaker_vec = np.asarray(speaker_vec)
    if controls.ndim < 2 or controls.shape[-2] == 0:
        raise EmptyInputError("controls must contain at least one frame")
    if speaker_vec.ndim != 1:
        raise DimensionError(f"speaker vector must be 1-D, got shape {speaker_vec.shape}")
    if embedding_dim is not None and speaker_vec.shape[0] != embedding_dim:
        raise DimensionError(f"speaker vector has length {speaker_vec.shape[0]}, expected {embedding_dim}")
    tiled = np.broadcast_to(speaker_vec, controls.shape[:-1] + speaker_vec.shape)
    return np.concatenate([controls, tiled.astype(controls.dtype, copy=False)], axis=-1)


def _check_conditioned(params: ModelParams, conditioned: np.ndarray):
    if conditioned.shape[-1] != params.config.conditioned_dim:
        raise DimensionError(
            f"conditioned width {conditioned.shape[-1]} != control_dim + embedding_dim "
            f"= {params.config.conditioned_dim}"
        )


def previous_frames(acoustics: np.ndarray) -> np.ndarray:
    """Shift acoustics one frame later so step t sees x_{t-1} (x_0 = 0)."""
    return gc.shift_frames(acoustics, 1)


def forward_graph(tensors: Mapping[str, gc.Tensor], config: ModelConfig, prev: np.ndarray,
                  conditioned: gc.Tensor) -> gc.Tensor:
    """Build the teacher-forced network on the tape.

    ``tensors`` maps weight names to tape nodes; ``prev`` holds the shifted
    acoustic frames and ``conditioned`` the control+speaker frames.
    """
    inp = gc.concat_channels([gc.constant(prev), conditioned])
    h = gc.pointwise_conv(inp, tensors["input_proj/w"], tensors["input_proj/b"])
    skips = None
    for i, d in enumerate(config.dilations):
        a = gc.causal_dilated_conv(h, tensors[f"layer{i}/filter/w"], tensors[f"layer{i}/filter/b"], d)
        b = gc.causal_dilated_conv(h, tensors[f"layer{i}/gate/w"], tensors[f"layer{i}/gate/b"], d)
        z = gc.gated_tanh(a, b)
        s = gc.pointwise_conv(z, tensors[f"layer{i}/skip/w"], tensors[f"layer{i}/skip/b"])
        skips = s if skips is None else gc.add(skips, s)
        h = gc.add(h, z)
    if skips is None:
        skips = h
    hidden = gc.relu(gc.pointwise_conv(skips, tensors["output/hidden/w"], tensors["output/hidden/b"]))
    return gc.pointwise_conv(hidden, tensors["output/proj/w"], tensors["output/proj/b"])


def teacher_forced_forward(params: ModelParams, acoustics: np.ndarray, conditioned: np.ndarray) -> np.ndarray:
    """One-step predictions given the ground-truth past frames."""
    acoustics = np.asarray(acoustics, dtype=params.config.dtype)
    conditioned = np.asarray(conditioned, dtype=params.config.dtype)
    if acoustics.ndim < 2 or acoustics.shape[-2] == 0:
        raise EmptyInputError("acoustic sequence is empty")
    if acoustics.shape[:-1] != conditioned.shape[:-1]:
        raise DimensionError(f"frame counts differ: {acoustics.shape} vs {conditioned.shape}")
    if acoustics.shape[-1] != params.config.acoustic_dim:
        raise DimensionError(f"acoustic width {acoustics.shape[-1]} != {params.config.acoustic_dim}")
    _check_conditioned(params, conditioned)
    tensors = {k: gc.constant(v) for k, v in params.weights.items()}
    out = forward_graph(tensors, params.config, previous_frames(acoustics), gc.constant(conditioned))
    return out.value


@dataclass
class StreamState:
    """Ring buffers holding the last ``dilation`` inputs of every conv layer."""

    dilations: tuple[int, ...]
    buffers: list[np.ndarray]
    frame: int = 0

    def snapshot(self) -> "StreamState":
        return StreamState(self.dilations, [b.copy() for b in self.buffers], self.frame)


def init_stream_state(params: ModelParams, batch_shape: tuple[int, ...] = ()) -> StreamState:
    cfg = params.config
    buffers = [np.zeros(batch_shape + (d, cfg.residual_channels), dtype=cfg.dtype) for d in cfg.dilations]
    return StreamState(cfg.dilations, buffers, 0)


def _step_inplace(state: StreamState, prev_frame, cond_frame, params: ModelParams) -> np.ndarray:
    W = params.weights
    t = state.frame
    inp = np.concatenate([prev_frame, cond_frame], axis=-1)
    h = inp @ W["input_proj/w"] + W["input_proj/b"]
    skips = None
    for i, d in enumerate(state.dilations):
        buf = state.buffers[i]
        slot = t % d
        past = buf[..., slot, :].copy()
        a = h @ W[f"layer{i}/filter/w"][1] + past @ W[f"layer{i}/filter/w"][0] + W[f"layer{i}/filter/b"]
        b = h @ W[f"layer{i}/gate/w"][1] + past @ W[f"layer{i}/gate/w"][0] + W[f"layer{i}/gate/b"]
        z = np.tanh(a) * gc._sigmoid(b)
        s = z @ W[f"layer{i}/skip/w"] + W[f"layer{i}/skip/b"]
        skips = s if skips is None else skips + s
        buf[..., slot, :] = h
        h = h + z
    if skips is None:
        skips = h
    hidden = skips @ W["output/hidden/w"] + W["output/hidden/b"]
    hidden = np.where(hidden > 0, hidden, 0.0).astype(hidden.dtype)
    state.frame = t + 1
    return hidden @ W["output/proj/w"] + W["output/proj/b"]


def streaming_step(state: StreamState, prev_frame: np.ndarray, cond_frame: np.ndarray,
                   params: ModelParams) -> tuple[np.ndarray, StreamState]:
    """Advance one frame without mutating ``state``."""
    cfg = params.config
    if state.dilations != cfg.dilations or any(
        b.shape[-2:] != (d, cfg.residual_channels) for b, d in zip(state.buffers, cfg.dilations)
    ):
        raise ContractError("stream state was not initialized for this model configuration")
    prev_frame = np.asarray(prev_frame, dtype=cfg.dtype)
    cond_frame = np.asarray(cond_frame, dtype=cfg.dtype)
    if prev_frame.shape[-1] != cfg.acoustic_dim or cond_frame.shape[-1] != cfg.conditioned_dim:
        raise DimensionError("frame widths do not match the model configuration")
    new_state = state.snapshot()
    out = _step_inplace(new_state, prev_frame, cond_frame, params)
    return out, new_state


def generate(params: ModelParams, conditioned: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    """Free-running generation: each prediction is fed back as the next input.

    ``conditioned`` may carry a leading batch axis; sequences are then
    generated in lockstep.
    """
    cfg = params.config
    conditioned = np.asarray(conditioned, dtype=cfg.dtype)
    _check_conditioned(params, conditioned)
    T = conditioned.shape[-2] if n_frames is None else n_frames
    if T <= 0:
        raise EmptyInputError("cannot generate zero frames")
    if conditioned.shape[-2] < T:
        raise ContractError(f"need {T} conditioning frames, got {conditioned.shape[-2]}")
    batch = conditioned.shape[:-2]
    state = init_stream_state(params, batch)
    prev = np.zeros(batch + (cfg.acoustic_dim,), dtype=cfg.dtype)
    out = np.empty(batch + (T, cfg.acoustic_dim), dtype=cfg.dtype)
    for t in range(T):
        prev = _step_inplace(state, prev, conditioned[..., t, :], params)
        out[..., t, :] = prev
    return out
