"""Hot numeric kernels with two interchangeable backends.

The compiled Cython extension (fedbot._ckernels) fuses the row-wise
loops that dominate small-model training: softmax, layer norm,
cross-entropy and the Adam update. A pure-numpy fallback implements the
same formulas and is selected automatically when the extension is not
built, or explicitly via the FEDBOT_PURE=1 environment variable.

All kernels take C-contiguous 2-D float32/float64 arrays (rows =
flattened leading axes) and return freshly allocated outputs. Matrix
multiplication is not here on purpose: numpy already hands it to BLAS.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FORCE_PURE = os.environ.get("FEDBOT_PURE", "") not in ("", "0")
_active = "numpy" if (_ckernels is None or _FORCE_PURE) else "compiled"


def backend() -> str:
    """Name of the backend in use: 'compiled' or 'numpy'."""
    return _active


def available_backends() -> tuple[str, ...]:
    return ("numpy",) if _ckernels is None else ("numpy", "compiled")


def set_backend(name: str) -> None:
    """Select a backend explicitly (used by tests and the benchmark)."""
    global _active
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    _active = name


def _compiled(x: np.ndarray) -> bool:
    return _active == "compiled" and x.dtype in (np.float32, np.float64)


# -- softmax (last axis, rows independent) ----------------------------------


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    if _compiled(x):
        out = np.empty_like(x)
        _ckernels.softmax_fwd(x, out)
        return out
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """dx = y * (dy - sum(dy * y)) per row."""
    if _compiled(y):
        dx = np.empty_like(y)
        _ckernels.softmax_bwd(y, dy, dx)
        return dx
    dot = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - dot)


# -- layer norm --------------------------------------------------------------


def layer_norm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Returns (y, mean, rstd); variance is the biased (1/C) estimate."""
    if _compiled(x):
        rows = x.shape[0]
        y = np.empty_like(x)
        mean = np.empty(rows, dtype=x.dtype)
        rstd = np.empty(rows, dtype=x.dtype)
        _ckernels.layer_norm_fwd(x, gain, bias, x.dtype.type(eps), y, mean, rstd)
        return y, mean, rstd
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = (x - mean[:, None]) * rstd[:, None] * gain + bias
    return y, mean, rstd


def layer_norm_bwd(
    x: np.ndarray,
    gain: np.ndarray,
    mean: np.ndarray,
    rstd: np.ndarray,
    dy: np.ndarray,
):
    """Returns (dx, dgain, dbias)."""
    if _compiled(x):
        dx = np.empty_like(x)
        dgain = np.zeros_like(gain)
        dbias = np.zeros_like(gain)
        _ckernels.layer_norm_bwd(x, gain, mean, rstd, dy, dx, dgain, dbias)
        return dx, dgain, dbias
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dyg = dy * gain
    c = x.shape[1]
    dx = rstd[:, None] * (
        dyg
        - dyg.mean(axis=1, keepdims=True)
        - xhat * (dyg * xhat).mean(axis=1, keepdims=True)
    )
    if dx.dtype != x.dtype:
        dx = dx.astype(x.dtype)
    return dx, dgain, dbias


# -- masked cross-entropy -----------------------------------------------------


def cross_entropy_fwd(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Per-row -log softmax(logits)[target] plus the softmax itself.

    targets int64 (R,), mask uint8 (R,); nll of masked-out rows is 0.
    Returns (nll (R,), probs (R, C)).
    """
    if _compiled(logits):
        rows = logits.shape[0]
        nll = np.empty(rows, dtype=logits.dtype)
        probs = np.empty_like(logits)
        _ckernels.cross_entropy_fwd(logits, targets, mask, nll, probs)
        return nll, probs
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    rows = np.arange(logits.shape[0])
    logp = (logits - m)[rows, targets] - np.log(z[:, 0])
    nll = np.where(mask.astype(bool), -logp, 0.0).astype(logits.dtype)
    return nll, probs


def cross_entropy_bwd(
    probs: np.ndarray, targets: np.ndarray, mask: np.ndarray, scale: float
) -> np.ndarray:
    """dlogits = (probs - onehot(target)) * mask * scale."""
    if _compiled(probs):
        dlogits = np.empty_like(probs)
        _ckernels.cross_entropy_bwd(probs, targets, mask, probs.dtype.type(scale), dlogits)
        return dlogits
    dlogits = probs * mask.astype(probs.dtype)[:, None]
    rows = np.arange(probs.shape[0])
    dlogits[rows, targets] -= mask.astype(probs.dtype)
    dlogits *= probs.dtype.type(scale)
    return dlogits


# -- optimizer updates --------------------------------------------------------


def adam_update(
    w: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    bias_c1: float,
    bias_c2: float,
):
    """One fused Adam step on flat arrays; returns (w', m', v')."""
    if _compiled(w):
        wn = np.empty_like(w)
        mn = np.empty_like(m)
        vn = np.empty_like(v)
        t = w.dtype.type
        _ckernels.adam_update(
            w, g, m, v, t(lr), t(beta1), t(beta2), t(eps), t(bias_c1), t(bias_c2), wn, mn, vn
        )
        return wn, mn, vn
    t = w.dtype.type
    mn = t(beta1) * m + t(1.0 - beta1) * g
    vn = t(beta2) * v + t(1.0 - beta2) * (g * g)
    mhat = mn / t(bias_c1)
    vhat = vn / t(bias_c2)
    wn = w - t(lr) * mhat / (np.sqrt(vhat) + t(eps))
    return wn, mn, vn
