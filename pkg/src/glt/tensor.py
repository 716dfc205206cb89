"""Minimal dense-tensor engine with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient buffer.
Differentiable ops are module-level functions; while a :class:`Tape` is
active they append `(output, backward_fn)` records in execution order, so
one reversed walk of the tape propagates gradients to every parameter
reachable from the loss. With no active tape the ops are plain numpy
(eval mode): deterministic, no recording, no grad.

Only scalar-with-tensor broadcasting is supported in the elementwise ops;
structured contractions go through :func:`contract` / :func:`linear`,
whose backward rules are exact. Default dtype is float32; pass float64
arrays (e.g. for finite-difference checks) and every op preserves them.

Hot inner kernels (softmax, layer-norm, sigmoid, scatter-add) live in
:mod:`glt.kernels` and carry a numba fast path.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_NANCHECK = os.environ.get("GLT_DEBUG_NANCHECK", "") not in ("", "0")


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.generic):
            # numpy scalar (e.g. from 0-d arithmetic): keep its precision
            data = np.asarray(data)
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # small conveniences; heavy lifting stays in the module functions
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)


class Tape:
    """Ordered record of differentiable ops; one backward walk per tape."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
        """Populate grads of every requires_grad tensor reachable from `loss`.

        Tensors in `params` that the loss never touched get explicit zero
        grads. Calling backward twice on one tape is an error.
        """
        if self._done:
            raise RuntimeError("backward() already called on this tape; record a new tape")
        if loss.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
        self._done = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue  # no downstream path to the loss
            backward_fn(out.grad)
        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finalize(out_data: np.ndarray, inputs: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if _NANCHECK and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ "
                             "(only scalar-with-tensor broadcasting is supported)")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        out = a.data + b

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
        return _finalize(out, (a,), bwd)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)
    return _finalize(out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    return add(a, mul(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        out = a.data * b

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g * b)
        return _finalize(out, (a,), bwd)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)
    return _finalize(out, (a, b), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = kernels.sigmoid(np.ascontiguousarray(x.data))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * y * (1.0 - y))
    return _finalize(y, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))
    return _finalize(out, (x,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return _minmax(a, b, take_min=True)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return _minmax(a, b, take_min=False)


def _minmax(a: Tensor, b: Tensor, take_min: bool) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "minimum" if take_min else "maximum")
    out = np.minimum(a.data, b.data) if take_min else np.maximum(a.data, b.data)

    def bwd(g):
        # gradient goes to the selected element; exact ties split 50/50
        if take_min:
            sel_a = a.data < b.data
            sel_b = b.data < a.data
        else:
            sel_a = a.data > b.data
            sel_b = b.data > a.data
        tie = a.data == b.data
        if a.requires_grad:
            a.accumulate_grad(g * (sel_a + 0.5 * tie))
        if b.requires_grad:
            b.accumulate_grad(g * (sel_b + 0.5 * tie))
    return _finalize(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or stacked with identical leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            b.accumulate_grad(np.matmul(a.data.swapaxes(-1, -2), g))
    return _finalize(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (..., k) times w (k, n), optional bias (n,); BLAS via a 2-D reshape."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: x {tuple(x.shape)} incompatible with w {tuple(w.shape)}")
    k, n = w.shape
    lead = x.shape[:-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, k))
    out2 = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (n,):
            raise DimensionError(f"linear: bias {tuple(b.shape)} must be ({n},)")
        out2 = out2 + b.data
    out = out2.reshape(*lead, n)

    def bwd(g):
        g2 = g.reshape(-1, n)
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data.T).reshape(*lead, k))
        if w.requires_grad:
            w.accumulate_grad(x2.T @ g2)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0))
    inputs = (x, w) if b is None else (x, w, b)
    return _finalize(out, inputs, bwd)


def _parse_contract_spec(spec: str) -> tuple[str, str, str]:
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s in (sa, sb):
        if len(set(s)) != len(s):
            raise ValueError(f"contract: repeated index within operand in {spec!r}")
    if not set(out) <= set(sa) | set(sb):
        raise ValueError(f"contract: output index not present in inputs in {spec!r}")
    # the swap-rule backward needs each operand recoverable from (out, other)
    if not set(sa) <= set(out) | set(sb) or not set(sb) <= set(out) | set(sa):
        raise ValueError(f"contract: spec {spec!r} not reversible for backward")
    return sa, sb, out


def contract(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with the index-swap backward rule."""
    sa, sb, so = _parse_contract_spec(spec)
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != len(sa) or b.ndim != len(sb):
        raise DimensionError(f"contract {spec!r}: got shapes {tuple(a.shape)}, {tuple(b.shape)}")
    out = np.einsum(spec, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.einsum(f"{so},{sb}->{sa}", g, b.data))
        if b.requires_grad:
            b.accumulate_grad(np.einsum(f"{sa},{so}->{sb}", a.data, g))
    return _finalize(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))
    return _finalize(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.transpose(g, inv))
    return _finalize(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])
    return _finalize(out, tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(np.take(g, i, axis=axis))
    return _finalize(out, tensors, bwd)


def expand(x: Tensor, axis: int, reps: int) -> Tensor:
    """Insert a new axis of length `reps` (tiled copies); backward sums it out."""
    x = as_tensor(x)
    out = np.repeat(np.expand_dims(x.data, axis), reps, axis=axis)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.sum(axis=axis))
    return _finalize(out, (x,), bwd)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along `axis`, dropping that axis."""
    x = as_tensor(x)
    out = np.take(x.data, index, axis=axis)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            sl = [slice(None)] * x.ndim
            sl[axis] = index
            full[tuple(sl)] = g
            x.accumulate_grad(full)
    return _finalize(out, (x,), bwd)


def index_select(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("index_select expects a 1-D index array")
    out = x.data[idx]

    def bwd(g):
        if x.requires_grad:
            trail = int(np.prod(x.shape[1:], dtype=np.int64)) if x.ndim > 1 else 1
            full = np.zeros_like(x.data)
            kernels.scatter_add_rows(full.reshape(x.shape[0], trail), idx,
                                     np.ascontiguousarray(g.reshape(len(idx), trail)))
            x.accumulate_grad(full)
    return _finalize(out, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any shape, output ids.shape + (dim,)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            kernels.scatter_add_rows(full, ids.ravel(),
                                     np.ascontiguousarray(g.reshape(ids.size, table.shape[1])))
            table.accumulate_grad(full)
    return _finalize(out, (table,), bwd)


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    g_exp = g
    for a in sorted(axes):
        g_exp = np.expand_dims(g_exp, a)
    return np.broadcast_to(g_exp, shape).copy()


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if x.requires_grad:
            if keepdims:
                x.accumulate_grad(np.broadcast_to(g, x.shape).copy())
            else:
                x.accumulate_grad(_expand_reduced(g, x.shape, axis))
    return _finalize(np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.size if axis is None else np.prod(
        [x.shape[a % x.ndim] for a in ((axis,) if isinstance(axis, int) else axis)])

    def bwd(g):
        if x.requires_grad:
            if keepdims:
                x.accumulate_grad(np.broadcast_to(g, x.shape) / denom)
            else:
                x.accumulate_grad(_expand_reduced(g, x.shape, axis) / denom)
    return _finalize(np.asarray(out), (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; outputs sum to 1 there."""
    x = as_tensor(x)
    ax = axis % x.ndim
    moved = np.moveaxis(x.data, ax, -1)
    lead = moved.shape[:-1]
    y2 = kernels.softmax2d(np.ascontiguousarray(moved.reshape(-1, moved.shape[-1])))
    y = np.moveaxis(y2.reshape(*lead, moved.shape[-1]), -1, ax)

    def bwd(g):
        if x.requires_grad:
            gm = np.ascontiguousarray(np.moveaxis(g, ax, -1).reshape(-1, y2.shape[-1]))
            gx2 = kernels.softmax2d_bwd(y2, gm)
            x.accumulate_grad(np.moveaxis(gx2.reshape(*lead, y2.shape[-1]), -1, ax))
    return _finalize(y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(f"layer_norm: gain/bias must be ({h},), got {tuple(gain.shape)}/{tuple(bias.shape)}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, h))
    y2, xhat, rstd = kernels.layernorm2d(x2, gain.data, bias.data, eps)
    out = y2.reshape(x.shape)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, h))
        gx2, ggain, gbias = kernels.layernorm2d_bwd(xhat, rstd, gain.data, g2)
        if x.requires_grad:
            x.accumulate_grad(gx2.reshape(x.shape))
        if gain.requires_grad:
            gain.accumulate_grad(ggain)
        if bias.requires_grad:
            bias.accumulate_grad(gbias)
    return _finalize(out, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * keep

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep)
    return _finalize(out, (x,), bwd)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood: -log softmax(logits)[target].

    `logits` is (n_classes,) with an int target, or (batch, n_classes)
    with an int array; the batched form averages over the batch.
    """
    logits = as_tensor(logits)
    squeeze = logits.ndim == 1
    x2 = logits.data.reshape(1, -1) if squeeze else logits.data
    if x2.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 1-D or 2-D, got {tuple(logits.shape)}")
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    bsz, ncls = x2.shape
    if t.shape != (bsz,):
        raise DimensionError(f"cross_entropy: {bsz} rows but {t.shape[0]} targets")
    if np.any(t < 0) or np.any(t >= ncls):
        raise IndexError(f"cross_entropy target out of range [0, {ncls})")
    shifted = x2 - x2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp_t = shifted[np.arange(bsz), t] - lse
    out = np.asarray(-logp_t.mean(), dtype=x2.dtype)

    def bwd(g):
        if logits.requires_grad:
            probs = np.exp(shifted - lse[:, None])
            probs[np.arange(bsz), t] -= 1.0
            gx = probs * (float(g) / bsz)
            logits.accumulate_grad(gx.reshape(logits.shape) if squeeze else gx)
    return _finalize(out, (logits,), bwd)
