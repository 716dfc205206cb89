"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from . import kernels
from .tensor import Tensor


class Adam:
    """Standard Adam; moment buffers live here, keyed like the param dict."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            kernels.adam_step(p.data.reshape(-1), g.reshape(-1),
                              self.m[k].reshape(-1), self.v[k].reshape(-1),
                              self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def global_grad_norm(params: Dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(params: Dict[str, Tensor], max_norm: Optional[float]) -> float:
    """Scale all grads so their joint L2 norm is at most `max_norm`; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm is not None and norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
