"""Adaptive-moment gradient descent (first/second moment accumulation)."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor


class Adam:
    """Per-parameter adaptive steps with bias-corrected moment estimates.

    Defaults: step 1e-3, decays 0.9 / 0.999, epsilon 1e-8.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_tensors(self, prefix: str = "adam.") -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"{prefix}m.{k}"] = self.m[k]
            out[f"{prefix}v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], t: int, prefix: str = "adam.") -> None:
        self.t = int(t)
        for k in self.params:
            self.m[k] = np.array(tensors[f"{prefix}m.{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(tensors[f"{prefix}v.{k}"], dtype=self.params[k].dtype)


def minibatches(n: int, batch_size: int, rng: np.random.Generator, drop_small: bool = True):
    """Shuffled index batches; a trailing batch of size 1 is merged into the previous one."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if drop_small and len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches
