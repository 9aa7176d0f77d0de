"""Dense float64 reverse-mode autodiff, sized for a small transformer.

Graphs are rebuilt on every forward pass; ``backward`` walks the tape in
reverse topological order and accumulates into ``.grad`` additively, so the
code that owns the parameters also owns zeroing them (see ``zero_grads``).
Includes Adam with bias correction and a central-difference gradient checker.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (decoding, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, node=Node(op, inputs, backward_fn))
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make("mul", data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", data, (a, b), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids``; gradient scatters back."""
    idx = np.asarray(ids, dtype=np.int64)
    rows = weight.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = int(idx[(idx < 0) | (idx >= rows)][0])
        raise IndexError(f"embedding: id {bad} out of range for table with {rows} rows")
    data = weight.data[idx]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return _make("embedding", data, (weight,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def bw(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        gx = (gh - m1 - xhat * m2) * inv_std
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g.copy()
        return gx, ggain, gbias

    return _make("layer_norm", data, (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x3 = x.data**3
    inner = _GELU_C * (x.data + 0.044715 * x3)
    t = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
        return (g * dx,)

    return _make("gelu", data, (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.data.shape),)

    return _make("reshape", data, (x,), bw)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank-2 input, got shape {x.data.shape}")
    data = x.data.T.copy()

    def bw(g):
        return (g.T.copy(),)

    return _make("transpose", data, (x,), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    dim = x.data.shape[axis]
    if start < 0 or length < 0 or start + length > dim:
        raise ShapeError(f"narrow: slice [{start}:{start + length}) exceeds axis {axis} of shape {x.data.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = x.data[sl].copy()

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make("narrow", data, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make("concat", data, tuple(tensors), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        data = x.data.mean()

        def bw(g):
            return (np.full_like(x.data, float(g) / x.data.size),)

    else:
        data = x.data.mean(axis=axis)
        count = x.data.shape[axis]

        def bw(g):
            return (np.repeat(np.expand_dims(g / count, axis), count, axis=axis),)

    return _make("mean", data, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _make("softmax", s, (x,), bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood (nats per row) of integer ``targets``.

    ``logits`` must be rank-2 (rows, classes); one target id per row.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected rank-2 logits, got shape {logits.data.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    rows, classes = logits.data.shape
    if tgt.shape != (rows,):
        raise ShapeError(f"softmax_cross_entropy: {rows} logit rows but target shape {tgt.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= classes):
        bad = int(tgt[(tgt < 0) | (tgt >= classes)][0])
        raise IndexError(f"softmax_cross_entropy: target {bad} out of range for {classes} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    data = np.float64(-logp[np.arange(rows), tgt].mean())

    def bw(g):
        p = np.exp(logp)
        p[np.arange(rows), tgt] -= 1.0
        return (p * (float(g) / rows),)

    return _make("softmax_cross_entropy", data, (logits,), bw)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make("sigmoid", s, (x,), bw)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy against float labels, numerically stable."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ShapeError(f"bce_with_logits: logits shape {logits.data.shape} vs labels shape {y.shape}")
    d = logits.data
    per = np.maximum(d, 0.0) - d * y + np.log1p(np.exp(-np.abs(d)))
    n = max(d.size, 1)
    data = np.float64(per.mean()) if d.size else np.float64(0.0)

    def bw(g):
        s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
        return ((s - y) * (float(g) / n),)

    return _make("bce_with_logits", data, (logits,), bw)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``; adds into ``.grad``."""
    if loss.data.shape != ():
        raise ValueError(f"backward: expected a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.node is not None or parent.requires_grad:
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not (parent.requires_grad or parent.node is not None):
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    """Adam moments and hyperparameters; one state drives one parameter list."""

    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Every param needs a grad."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"adam_step: state tracks {len(state.m)} params, got {len(params)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} has no gradient")
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / (1.0 - b1**t)
        vhat = state.v[i] / (1.0 - b2**t)
        p.data -= state.eta * mhat / (np.sqrt(vhat) + state.epsilon)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over ``x``.

    ``f`` must be deterministic and return a scalar Tensor. Non-finite
    gradients on either side report ``inf``.
    """
    if not x.requires_grad:
        raise ValueError("grad_check: input must require grad")
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)

    a = analytic.reshape(-1)
    if not (np.isfinite(a).all() and np.isfinite(numeric).all()):
        return float("inf")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    rel = np.abs(a - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
