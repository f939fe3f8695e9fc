"""Differentiable tensor operations and optimizer steps.

Every op computes eagerly on numpy arrays (hot paths go through
fedbot.kernels) and, when a GradGraph is active on the current thread,
records a node whose backward rule maps the output gradient onto input
gradients. Masks, token ids and RNGs are plain numpy objects, not
Tensors: they are never differentiated.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError
from .tensor import GradGraph, Tensor
from .weights import ModelWeights


def _record(op, inputs, output, backward) -> Tensor:
    graph = GradGraph.current()
    if graph is not None:
        graph.record(op, inputs, output, backward)
    return output


def _same_dtype(op: str, *tensors: Tensor) -> None:
    first = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != first:
            raise ContractError(f"{op}: mixed dtypes {first} and {t.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and structural ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    out = Tensor._wrap(a.data + b.data)

    def backward(d):
        return _unbroadcast(d, a.shape), _unbroadcast(d, b.shape)

    return _record("add", (a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)
    out = Tensor._wrap(a.data - b.data)

    def backward(d):
        return _unbroadcast(d, a.shape), _unbroadcast(-d, b.shape)

    return _record("sub", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    out = Tensor._wrap(a.data * b.data)

    def backward(d):
        return _unbroadcast(d * b.data, a.shape), _unbroadcast(d * a.data, b.shape)

    return _record("mul", (a, b), out, backward)


def scale(a: Tensor, s: float) -> Tensor:
    factor = a.dtype.type(s)
    out = Tensor._wrap(a.data * factor)

    def backward(d):
        return (d * factor,)

    return _record("scale", (a,), out, backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._wrap(np.ascontiguousarray(a.data.reshape(shape)))

    def backward(d):
        return (d.reshape(a.shape),)

    return _record("reshape", (a,), out, backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor._wrap(np.ascontiguousarray(a.data.transpose(axes)))
    inverse = tuple(np.argsort(axes))

    def backward(d):
        return (np.ascontiguousarray(d.transpose(inverse)),)

    return _record("transpose", (a,), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands share leading dims,
    or with a single shared right matrix (b 2-D)."""
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    shared_rhs = b.ndim == 2 and a.ndim > 2
    if not shared_rhs and a.ndim != b.ndim:
        raise ShapeError(f"matmul rank mismatch: {a.shape} x {b.shape}")
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def backward(d):
        if shared_rhs:
            da = d @ b.data.T
            k, n = b.shape
            db = a.data.reshape(-1, k).T @ d.reshape(-1, n)
        else:
            da = d @ np.swapaxes(b.data, -1, -2)
            db = np.swapaxes(a.data, -1, -2) @ d
        return da, db

    return _record("matmul", (a, b), out, backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(a.data.sum(dtype=a.dtype).reshape(1))

    def backward(d):
        return (np.full(a.shape, d.reshape(-1)[0], dtype=a.dtype),)

    return _record("sum", (a,), out, backward)


def mean_all(a: Tensor) -> Tensor:
    inv = a.dtype.type(1.0 / a.size)
    out = Tensor._wrap((a.data.sum(dtype=a.dtype) * inv).reshape(1))

    def backward(d):
        return (np.full(a.shape, d.reshape(-1)[0] * inv, dtype=a.dtype),)

    return _record("mean", (a,), out, backward)


# -- nonlinearities -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0))

    def backward(d):
        # gradient at exactly 0 is 0
        return (d * (a.data > 0),)

    return _record("relu", (a,), out, backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    cols = a.shape[-1]
    x2d = a.data.reshape(-1, cols)
    y2d = kernels.softmax_fwd(x2d)
    out = Tensor._wrap(y2d.reshape(a.shape))

    def backward(d):
        dx = kernels.softmax_bwd(y2d, np.ascontiguousarray(d.reshape(-1, cols)))
        return (dx.reshape(a.shape),)

    return _record("softmax", (a,), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize the last axis to mean 0 / variance 1, then scale and shift."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    _same_dtype("layer_norm", x, gain, bias)
    cols = x.shape[-1]
    if gain.shape != (cols,) or bias.shape != (cols,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({cols},), got {gain.shape}/{bias.shape}"
        )
    x2d = x.data.reshape(-1, cols)
    y2d, mean, rstd = kernels.layer_norm_fwd(x2d, gain.data, bias.data, eps)
    out = Tensor._wrap(y2d.reshape(x.shape))

    def backward(d):
        d2d = np.ascontiguousarray(d.reshape(-1, cols))
        dx, dgain, dbias = kernels.layer_norm_bwd(x2d, gain.data, mean, rstd, d2d)
        return dx.reshape(x.shape), dgain, dbias

    return _record("layer_norm", (x, gain, bias), out, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table [V, d], ids int array of any shape -> [..., d]."""
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.max() if ids.max() >= vocab else ids.min())
        raise IndexError(f"token id {bad} out of range for vocab size {vocab}")
    out = Tensor._wrap(np.ascontiguousarray(table.data[ids]))

    def backward(d):
        dtable = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(dtable, ids.reshape(-1), d.reshape(-1, table.shape[1]))
        return (dtable,)

    return _record("embedding", (table,), out, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero a fraction `rate` and scale the rest by 1/(1-rate)."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ContractError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    factor = x.dtype.type(1.0 / (1.0 - rate))
    out = Tensor._wrap(x.data * keep * factor)

    def backward(d):
        return (d * keep * factor,)

    return _record("dropout", (x,), out, backward)


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace positions where keep is False by `value` (broadcastable mask)."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = Tensor._wrap(np.where(keep, x.data, x.dtype.type(value)))

    def backward(d):
        return (d * keep,)

    return _record("masked_fill", (x,), out, backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """Mean -log softmax(logits)[target] over positions where pad_mask is True.

    logits [..., V]; targets/pad_mask shaped like logits without the last
    axis. Padding (mask False) contributes zero. With every position
    masked the loss is defined as 0 and a warning is emitted.
    """
    targets = np.asarray(targets)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or pad_mask.shape != targets.shape:
        raise ShapeError(
            f"targets/pad_mask shape {targets.shape}/{pad_mask.shape} does not "
            f"match logits {logits.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        bad = int(targets.max() if targets.max() >= vocab else targets.min())
        raise IndexError(f"target id {bad} out of range for vocab size {vocab}")

    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = np.ascontiguousarray(targets.reshape(-1), dtype=np.int64)
    flat_mask = np.ascontiguousarray(pad_mask.reshape(-1), dtype=np.uint8)
    n_included = int(flat_mask.sum())

    if n_included == 0:
        warnings.warn("cross_entropy: all positions masked; loss defined as 0")
        out = Tensor._wrap(np.zeros(1, dtype=logits.dtype))

        def backward_zero(d):
            return (np.zeros(logits.shape, dtype=logits.dtype),)

        return _record("cross_entropy", (logits,), out, backward_zero)

    nll, probs = kernels.cross_entropy_fwd(flat_logits, flat_targets, flat_mask)
    loss = Tensor._wrap((nll.sum(dtype=logits.dtype) / logits.dtype.type(n_included)).reshape(1))

    def backward(d):
        upstream = float(d.reshape(-1)[0])
        dflat = kernels.cross_entropy_bwd(
            probs, flat_targets, flat_mask, upstream / n_included
        )
        return (dflat.reshape(logits.shape),)

    return _record("cross_entropy", (logits,), loss, backward)


def backward(graph: GradGraph, loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar loss w.r.t. every named parameter on the tape."""
    return graph.backward(loss)


# -- optimizer steps ----------------------------------------------------------


def _check_grads(weights: ModelWeights, grads: Mapping[str, Tensor]) -> None:
    missing = [name for name, _ in weights if name not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing}")


def _grad_array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g)


def sgd_step(weights: ModelWeights, grads: Mapping[str, Tensor], lr: float) -> ModelWeights:
    """w' = w - lr * g, per tensor, order preserved."""
    _check_grads(weights, grads)

    def step(name: str, w: Tensor) -> Tensor:
        g = _grad_array(grads[name])
        if g.shape != w.shape:
            raise ShapeError(f"gradient shape {g.shape} != weight shape {w.shape} for {name}")
        return Tensor._wrap(w.data - w.dtype.type(lr) * g.astype(w.dtype, copy=False))

    return weights.map(step)


@dataclass
class AdamState:
    """First/second moment accumulators; empty state means step 0."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: Optional[AdamState],
    weights: ModelWeights,
    grads: Mapping[str, Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> tuple[AdamState, ModelWeights]:
    """Standard bias-corrected Adam update; returns (new state, new weights)."""
    _check_grads(weights, grads)
    if state is None:
        state = AdamState()
    t = state.step + 1
    bias_c1 = 1.0 - beta1**t
    bias_c2 = 1.0 - beta2**t
    new_state = AdamState(step=t, m={}, v={})
    updated: list[tuple[str, Tensor]] = []
    for name, w in weights:
        g = _grad_array(grads[name]).astype(w.dtype, copy=False)
        if g.shape != w.shape:
            raise ShapeError(f"gradient shape {g.shape} != weight shape {w.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(w.size, dtype=w.dtype)
            v = np.zeros(w.size, dtype=w.dtype)
        elif m.shape != (w.size,):
            raise ContractError(f"adam state shape mismatch for {name}")
        wn, mn, vn = kernels.adam_update(
            w.data.reshape(-1), g.reshape(-1), m, v, lr, beta1, beta2, eps, bias_c1, bias_c2
        )
        new_state.m[name] = mn
        new_state.v[name] = vn
        updated.append((name, Tensor._wrap(wn.reshape(w.shape), name=name)))
    return new_state, ModelWeights(updated)
