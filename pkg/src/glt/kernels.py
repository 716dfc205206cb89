"""Hot numeric kernels, numba-jitted with a pure-numpy fallback.

Everything here operates on plain ndarrays; the autodiff layer in
:mod:`glt.tensor` reshapes its operands to the 2-D row layout these
kernels expect. The backend is picked once at import time:

* ``GLT_BACKEND=numpy`` forces the pure-numpy fallback,
* ``GLT_BACKEND=numba`` insists on the jitted path (raises if numba is
  missing),
* unset: use numba when importable, otherwise fall back silently.

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "GLT_BACKEND"


def _resolve_backend() -> str:
    choice = os.environ.get(_ENV_FLAG, "").strip().lower()
    if choice not in ("", "numpy", "numba"):
        raise ValueError(f"{_ENV_FLAG} must be 'numpy' or 'numba', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _resolve_backend()


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------

def np_softmax2d(x):
    """Row-wise softmax with max subtraction; x is (rows, n)."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax2d_bwd(y, gy):
    inner = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - inner)


def np_layernorm2d(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    y = xhat * gain + bias
    return y, xhat, rstd[:, 0]


def np_layernorm2d_bwd(xhat, rstd, gain, gy):
    gxhat = gy * gain
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def np_scatter_add_rows(out2d, idx, src2d):
    """out2d[idx[r]] += src2d[r] with repeated indices accumulated."""
    np.add.at(out2d, idx, src2d)


def np_adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam update on flat f32/f64 views; bc* are the bias corrections."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _nb_softmax2d(x):
        rows, n = x.shape
        y = np.empty_like(x)
        for r in range(rows):
            hi = x[r, 0]
            for j in range(1, n):
                if x[r, j] > hi:
                    hi = x[r, j]
            tot = 0.0
            for j in range(n):
                e = np.exp(x[r, j] - hi)
                y[r, j] = e
                tot += e
            for j in range(n):
                y[r, j] /= tot
        return y

    @njit(cache=True)
    def _nb_softmax2d_bwd(y, gy):
        rows, n = y.shape
        gx = np.empty_like(y)
        for r in range(rows):
            inner = 0.0
            for j in range(n):
                inner += gy[r, j] * y[r, j]
            for j in range(n):
                gx[r, j] = y[r, j] * (gy[r, j] - inner)
        return gx

    @njit(cache=True)
    def _nb_layernorm2d(x, gain, bias, eps):
        rows, n = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for j in range(n):
                mu += x[r, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[r, j] - mu
                var += d * d
            var /= n
            rs = 1.0 / np.sqrt(var + eps)
            rstd[r] = rs
            for j in range(n):
                xh = (x[r, j] - mu) * rs
                xhat[r, j] = xh
                y[r, j] = xh * gain[j] + bias[j]
        return y, xhat, rstd

    @njit(cache=True)
    def _nb_layernorm2d_bwd(xhat, rstd, gain, gy):
        rows, n = xhat.shape
        gx = np.empty_like(xhat)
        ggain = np.zeros(n, dtype=xhat.dtype)
        gbias = np.zeros(n, dtype=xhat.dtype)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(n):
                gh = gy[r, j] * gain[j]
                m1 += gh
                m2 += gh * xhat[r, j]
            m1 /= n
            m2 /= n
            for j in range(n):
                gh = gy[r, j] * gain[j]
                gx[r, j] = rstd[r] * (gh - m1 - xhat[r, j] * m2)
                ggain[j] += gy[r, j] * xhat[r, j]
                gbias[j] += gy[r, j]
        return gx, ggain, gbias

    @njit(cache=True)
    def _nb_sigmoid(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            xi = flat[i]
            if xi >= 0.0:
                out[i] = 1.0 / (1.0 + np.exp(-xi))
            else:
                e = np.exp(xi)
                out[i] = e / (1.0 + e)
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_scatter_add_rows(out2d, idx, src2d):
        rows, n = src2d.shape
        for r in range(rows):
            t = idx[r]
            for j in range(n):
                out2d[t, j] += src2d[r, j]

    @njit(cache=True)
    def _nb_adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        for i in range(p.size):
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)

    softmax2d = _nb_softmax2d
    softmax2d_bwd = _nb_softmax2d_bwd
    layernorm2d = _nb_layernorm2d
    layernorm2d_bwd = _nb_layernorm2d_bwd
    sigmoid = _nb_sigmoid
    scatter_add_rows = _nb_scatter_add_rows
    adam_step = _nb_adam_step
else:
    softmax2d = np_softmax2d
    softmax2d_bwd = np_softmax2d_bwd
    layernorm2d = np_layernorm2d
    layernorm2d_bwd = np_layernorm2d_bwd
    sigmoid = np_sigmoid
    scatter_add_rows = np_scatter_add_rows
    adam_step = np_adam_step
