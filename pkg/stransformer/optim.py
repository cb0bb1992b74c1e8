"""Adam over named tensors, plus global-norm gradient clipping."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from stransformer.autodiff import Tensor


class Adam:
    """Adaptive moment estimation with bias-corrected first and second moments.

    Moments are keyed by parameter name and created lazily on first sight.
    """

    def __init__(
        self,
        lr: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, Tensor]) -> None:
        """Update every parameter in place from its ``grad``; parameters without one are skipped."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        step_size = self.lr / bc1

        for name, param in params.items():
            grad = param.grad
            if grad is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * grad
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (grad * grad)

            denom = np.sqrt(self.v[name] / bc2) + self.eps
            param.data -= step_size * self.m[name] / denom


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for param in params.values():
        if param.grad is not None:
            total += float(np.sum(param.grad * param.grad))
    return math.sqrt(total)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for param in params.values():
            if param.grad is not None:
                param.grad *= factor
    return norm
