"""Finite-difference checks of every primitive and of the full network loss."""
from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .speakerspace import embedding_name
from .synthnet import ModelConfig, build_model, forward_graph, previous_frames

STEP = 1e-5
TOLERANCE = 1e-5


def _primitive_cases(rng: np.random.Generator):
    T, C, K = 12, 3, 4
    x = rng.normal(size=(T, C))
    y = rng.normal(size=(T, C))
    target = rng.normal(size=(T, K))
    proj = rng.normal(size=(C, K))

    def head(h):
        # fixed random projection + L1 so every primitive feeds a scalar
        return gc.l1_loss(gc.pointwise_conv(h, gc.constant(proj), gc.constant(np.zeros(K))), target)

    return {
        "causal_dilated_conv": (
            lambda p: gc.l1_loss(gc.causal_dilated_conv(p["x"], p["w"], p["b"], 2), target),
            {"x": x, "w": rng.normal(size=(2, C, K)), "b": rng.normal(size=K)},
        ),
        "pointwise_conv": (
            lambda p: gc.l1_loss(gc.pointwise_conv(p["x"], p["w"], p["b"]), target),
            {"x": x, "w": rng.normal(size=(C, K)), "b": rng.normal(size=K)},
        ),
        "gated_tanh": (lambda p: head(gc.gated_tanh(p["a"], p["b"])), {"a": x, "b": y}),
        "relu": (lambda p: head(gc.relu(p["x"])), {"x": x}),
        "add": (lambda p: head(gc.add(p["a"], p["b"])), {"a": x, "b": y}),
        "mul": (lambda p: head(gc.mul(p["a"], p["b"])), {"a": x, "b": y}),
        "concat_channels": (
            lambda p: gc.l1_loss(gc.concat_channels([p["a"], p["b"]]), np.concatenate([target, target[:, :2]], 1)),
            {"a": x, "b": rng.normal(size=(T, 3))},
        ),
        "repeat_frames": (
            lambda p: head(gc.repeat_frames(p["v"], T)),
            {"v": rng.normal(size=C)},
        ),
        "stack": (
            lambda p: gc.total(gc.mul(gc.stack([p["a"], p["b"]]), gc.constant(np.stack([y, x])))),
            {"a": x, "b": y},
        ),
        "l1_loss": (lambda p: gc.l1_loss(p["x"], y), {"x": x}),
    }


def small_network_config() -> ModelConfig:
    return ModelConfig(residual_channels=8, skip_channels=6, control_dim=3, acoustic_dim=4, embedding_dim=4)


def network_case(seed: int, config: ModelConfig | None = None, T: int = 40, batch: int = 2):
    """Scalar L1 loss of the full network on random data, with all weights and embedding rows as inputs."""
    config = config or small_network_config()
    rng = np.random.default_rng(seed)
    model = build_model(config, batch, seed)
    for name in model.weight_names():
        if name.endswith("/b"):
            model.weights[name] = rng.normal(0.0, 0.1, size=model.weights[name].shape)
    acoustics = rng.normal(size=(batch, T, config.acoustic_dim))
    controls = rng.normal(size=(batch, T, config.control_dim))
    prev = previous_frames(acoustics)
    params = dict(model.named_arrays())

    def loss(p):
        rows = gc.stack([p[embedding_name(i)] for i in range(batch)])
        cond = gc.concat_channels([gc.constant(controls), gc.repeat_frames(rows, T)])
        pred = forward_graph(p, config, prev, cond)
        return gc.l1_loss(pred, acoustics)

    return loss, params


def run_suite(seeds=(0, 1, 2), step: float = STEP, n_coords: int = 64) -> dict[str, float]:
    """Max relative error per primitive and for the full network, over all seeds."""
    results: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (f, params) in _primitive_cases(rng).items():
            err = gc.finite_difference_check(f, params, step, None, rng)
            results[name] = max(results.get(name, 0.0), err)
        f, params = network_case(seed)
        err = gc.finite_difference_check(f, params, step, n_coords, np.random.default_rng(seed))
        results["network"] = max(results.get("network", 0.0), err)
    return results
