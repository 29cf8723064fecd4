"""A small tape-based reverse-mode differentiation engine.

Only the primitives the acoustic model needs are provided. Tensors are
frame-major: the last axis holds channels, the one before it holds frames,
and an optional leading axis stacks independent sequences of equal length.
Causal ops never mix frames across that leading axis.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "causal_dilated_conv",
    "pointwise_conv",
    "gated_tanh",
    "relu",
    "concat_channels",
    "add",
    "mul",
    "total",
    "stack",
    "repeat_frames",
    "l1_loss",
    "backward",
    "finite_difference_check",
    "shift_frames",
]


class Tensor:
    """A node on the tape: a cached forward value plus its gradient slot."""

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "name", "_backward")

    def __init__(self, value, parents=(), op="leaf", requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"


def parameter(value, name=None) -> Tensor:
    """Leaf whose gradient is stored by :func:`backward`."""
    return Tensor(np.array(value, copy=True), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite values produced by {op}")


def shift_frames(x: np.ndarray, d: int) -> np.ndarray:
    """Delay ``x`` by ``d`` frames along axis -2, filling with zeros."""
    out = np.zeros_like(x)
    if d < x.shape[-2]:
        out[..., d:, :] = x[..., : x.shape[-2] - d, :]
    return out


def _advance_frames(g: np.ndarray, d: int) -> np.ndarray:
    # adjoint of shift_frames
    out = np.zeros_like(g)
    if d < g.shape[-2]:
        out[..., : g.shape[-2] - d, :] = g[..., d:, :]
    return out


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def causal_dilated_conv(x: Tensor, w: Tensor, b: Tensor, dilation: int) -> Tensor:
    """Two-tap causal convolution.

    ``w`` has shape (2, Cin, Cout); ``w[0]`` weights the frame ``dilation``
    steps back and ``w[1]`` weights the current frame. Frames before the
    start of the sequence read as zero.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if dilation < 1:
        raise DimensionError(f"dilation must be >= 1, got {dilation}")
    if w.value.ndim != 3 or w.shape[0] != 2:
        raise DimensionError(f"conv weights must be (2, Cin, Cout), got {w.shape}")
    if x.value.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"input channels {x.shape[-1:]} do not match weights {w.shape}")
    if b.shape != (w.shape[2],):
        raise DimensionError(f"bias shape {b.shape} does not match Cout={w.shape[2]}")

    past = shift_frames(x.value, dilation)
    out_val = x.value @ w.value[1] + past @ w.value[0] + b.value
    _check_finite(out_val, "causal_dilated_conv")
    out = Tensor(out_val, (x, w, b), "causal_dilated_conv")

    def _backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.value[1].T + _advance_frames(g @ w.value[0].T, dilation))
        if w.requires_grad:
            gf = _flat(g)
            gw = np.stack([_flat(past).T @ gf, _flat(x.value).T @ gf])
            w._accumulate(gw)
        if b.requires_grad:
            b._accumulate(_flat(g).sum(axis=0))

    out._backward = _backward
    return out


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-frame affine map ``x @ w + b`` (a 1x1 convolution)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.value.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"input channels {x.shape[-1:]} do not match weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match Cout={w.shape[1]}")
    out_val = x.value @ w.value + b.value
    _check_finite(out_val, "pointwise_conv")
    out = Tensor(out_val, (x, w, b), "pointwise_conv")

    def _backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.value.T)
        if w.requires_grad:
            w._accumulate(_flat(x.value).T @ _flat(g))
        if b.requires_grad:
            b._accumulate(_flat(g).sum(axis=0))

    out._backward = _backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def gated_tanh(a: Tensor, b: Tensor) -> Tensor:
    """``tanh(a) * sigmoid(b)`` elementwise."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "gated_tanh")
    ta = np.tanh(a.value)
    sb = _sigmoid(b.value)
    out = Tensor(ta * sb, (a, b), "gated_tanh")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * sb * (1.0 - ta * ta))
        if b.requires_grad:
            b._accumulate(g * ta * sb * (1.0 - sb))

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.value > 0
    out = Tensor(np.where(mask, x.value, 0.0).astype(x.value.dtype), (x,), "relu")

    def _backward(g):
        x._accumulate(g * mask)

    out._backward = _backward
    return out


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel (last) axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat_channels needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat_channels: leading shapes differ {lead} vs {t.shape[:-1]}")
    out = Tensor(np.concatenate([t.value for t in tensors], axis=-1), tensors, "concat_channels")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def _backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[..., lo:hi])

    out._backward = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.value + b.value, (a, b), "add")

    def _backward(g):
        a._accumulate(g)
        b._accumulate(g)

    out._backward = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.value * b.value, (a, b), "mul")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * b.value)
        if b.requires_grad:
            b._accumulate(g * a.value)

    out._backward = _backward
    return out


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar node."""
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.value.sum()), (x,), "total")

    def _backward(g):
        x._accumulate(np.full_like(x.value, g))

    out._backward = _backward
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack needs at least one tensor")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = Tensor(np.stack([t.value for t in tensors]), tensors, "stack")

    def _backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])

    out._backward = _backward
    return out


def repeat_frames(v: Tensor, n_frames: int) -> Tensor:
    """Broadcast ``(..., C)`` to ``(..., n_frames, C)``."""
    v = _as_tensor(v)
    if n_frames < 1:
        raise DimensionError("repeat_frames needs n_frames >= 1")
    val = np.repeat(v.value[..., None, :], n_frames, axis=-2)
    out = Tensor(val, (v,), "repeat_frames")

    def _backward(g):
        v._accumulate(g.sum(axis=-2))

    out._backward = _backward
    return out


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element, as a scalar node."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape(pred, target, "l1_loss")
    diff = pred.value - target.value
    n = diff.size
    out = Tensor(np.asarray(np.abs(diff).sum() / n), (pred, target), "l1_loss")

    def _backward(g):
        s = np.sign(diff) * (g / n)
        if pred.requires_grad:
            pred._accumulate(s)
        if target.requires_grad:
            target._accumulate(-s)

    out._backward = _backward
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every parameter leaf reachable from ``loss``."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if node.parents:
            node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            _check_finite(node.grad, f"backward through {node.op}")
            if node.parents:
                # intermediate gradients are not needed once propagated
                node.grad = None


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    n_coords: int | None = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``f`` maps a dict of parameter tensors to a scalar loss tensor. Up to
    ``n_coords`` coordinates are sampled across all parameters (all of them
    when ``n_coords`` is None). Returns the maximum of
    ``|analytic - numeric| / (|numeric| + 1e-12)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    values = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def evaluate() -> float:
        out = f({k: constant(v) for k, v in values.items()})
        val = float(out.value)
        if not np.isfinite(val):
            raise NumericError("function evaluation is not finite")
        return val

    leaves = {k: parameter(v, name=k) for k, v in values.items()}
    loss = f(leaves)
    if not np.isfinite(loss.value).all():
        raise NumericError("function evaluation is not finite")
    backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in leaves.items()}

    coords = [(k, i) for k in values for i in range(values[k].size)]
    if n_coords is not None and n_coords < len(coords):
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[j] for j in sorted(picks)]

    worst = 0.0
    for k, i in coords:
        flat = values[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        hi = evaluate()
        flat[i] = orig - step
        lo = evaluate()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        analytic = grads[k].reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / (abs(numeric) + 1e-12))
    return worst
