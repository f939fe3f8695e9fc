# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused row-wise kernels backing fedbot.kernels.

Same formulas as the numpy fallback; callers allocate the outputs.
"""

from libc.math cimport exp, expf, log, logf, sqrt, sqrtf

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


cdef inline floating _log(floating x) noexcept nogil:
    if floating is float:
        return logf(x)
    else:
        return log(x)


cdef inline floating _sqrt(floating x) noexcept nogil:
    if floating is float:
        return sqrtf(x)
    else:
        return sqrt(x)


def softmax_fwd(const floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t r, c, R = x.shape[0], C = x.shape[1]
    cdef floating m, s
    with nogil:
        for r in range(R):
            m = x[r, 0]
            for c in range(1, C):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0
            for c in range(C):
                out[r, c] = _exp(x[r, c] - m)
                s += out[r, c]
            for c in range(C):
                out[r, c] /= s


def softmax_bwd(const floating[:, ::1] y, const floating[:, ::1] dy, floating[:, ::1] dx):
    cdef Py_ssize_t r, c, R = y.shape[0], C = y.shape[1]
    cdef floating dot
    with nogil:
        for r in range(R):
            dot = 0
            for c in range(C):
                dot += dy[r, c] * y[r, c]
            for c in range(C):
                dx[r, c] = y[r, c] * (dy[r, c] - dot)


def layer_norm_fwd(
    const floating[:, ::1] x,
    const floating[::1] gain,
    const floating[::1] bias,
    floating eps,
    floating[:, ::1] y,
    floating[::1] mean,
    floating[::1] rstd,
):
    cdef Py_ssize_t r, c, R = x.shape[0], C = x.shape[1]
    cdef floating mu, var, d, rs
    with nogil:
        for r in range(R):
            mu = 0
            for c in range(C):
                mu += x[r, c]
            mu /= C
            var = 0
            for c in range(C):
                d = x[r, c] - mu
                var += d * d
            var /= C
            rs = 1.0 / _sqrt(var + eps)
            mean[r] = mu
            rstd[r] = rs
            for c in range(C):
                y[r, c] = (x[r, c] - mu) * rs * gain[c] + bias[c]


def layer_norm_bwd(
    const floating[:, ::1] x,
    const floating[::1] gain,
    const floating[::1] mean,
    const floating[::1] rstd,
    const floating[:, ::1] dy,
    floating[:, ::1] dx,
    floating[::1] dgain,
    floating[::1] dbias,
):
    cdef Py_ssize_t r, c, R = x.shape[0], C = x.shape[1]
    cdef floating xhat, dyg, m1, m2, rs
    with nogil:
        for r in range(R):
            rs = rstd[r]
            m1 = 0
            m2 = 0
            for c in range(C):
                xhat = (x[r, c] - mean[r]) * rs
                dyg = dy[r, c] * gain[c]
                m1 += dyg
                m2 += dyg * xhat
                dgain[c] += dy[r, c] * xhat
                dbias[c] += dy[r, c]
            m1 /= C
            m2 /= C
            for c in range(C):
                xhat = (x[r, c] - mean[r]) * rs
                dx[r, c] = rs * (dy[r, c] * gain[c] - m1 - xhat * m2)


def cross_entropy_fwd(
    const floating[:, ::1] logits,
    const cnp.int64_t[::1] targets,
    const cnp.uint8_t[::1] mask,
    floating[::1] nll,
    floating[:, ::1] probs,
):
    cdef Py_ssize_t r, c, R = logits.shape[0], C = logits.shape[1]
    cdef floating m, s
    with nogil:
        for r in range(R):
            m = logits[r, 0]
            for c in range(1, C):
                if logits[r, c] > m:
                    m = logits[r, c]
            s = 0
            for c in range(C):
                probs[r, c] = _exp(logits[r, c] - m)
                s += probs[r, c]
            for c in range(C):
                probs[r, c] /= s
            if mask[r]:
                nll[r] = _log(s) - (logits[r, targets[r]] - m)
            else:
                nll[r] = 0


def cross_entropy_bwd(
    const floating[:, ::1] probs,
    const cnp.int64_t[::1] targets,
    const cnp.uint8_t[::1] mask,
    floating scale,
    floating[:, ::1] dlogits,
):
    cdef Py_ssize_t r, c, R = probs.shape[0], C = probs.shape[1]
    with nogil:
        for r in range(R):
            if mask[r]:
                for c in range(C):
                    dlogits[r, c] = probs[r, c] * scale
                dlogits[r, targets[r]] -= scale
            else:
                for c in range(C):
                    dlogits[r, c] = 0


def adam_update(
    const floating[::1] w,
    const floating[::1] g,
    const floating[::1] m,
    const floating[::1] v,
    floating lr,
    floating beta1,
    floating beta2,
    floating eps,
    floating bias_c1,
    floating bias_c2,
    floating[::1] wn,
    floating[::1] mn,
    floating[::1] vn,
):
    cdef Py_ssize_t i, n = w.shape[0]
    cdef floating mi, vi
    with nogil:
        for i in range(n):
            mi = beta1 * m[i] + (1 - beta1) * g[i]
            vi = beta2 * v[i] + (1 - beta2) * g[i] * g[i]
            mn[i] = mi
            vn[i] = vi
            wn[i] = w[i] - lr * (mi / bias_c1) / (_sqrt(vi / bias_c2) + eps)


def backend_tag():
    return "compiled"
