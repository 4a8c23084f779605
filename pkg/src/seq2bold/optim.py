"""Adaptive moment estimation (Adam) over named parameter tensors.

The optimizer only ever touches the names it was constructed with, so a
trainable mask (e.g. subject-only fine-tuning) is enforced structurally:
frozen tensors are never read or written.
"""
from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .errors import ConfigError


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        trainable: set[str] | None = None,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        names = sorted(params) if trainable is None else sorted(trainable)
        unknown = [n for n in names if n not in params]
        if unknown:
            raise ConfigError(f"trainable names not in parameter set: {unknown[:4]}")
        self.params = {n: params[n] for n in names}
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment estimates as named arrays for checkpointing."""
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int):
        for name in self.params:
            if f"adam.m.{name}" in tensors:
                self.m[name] = np.array(tensors[f"adam.m.{name}"], dtype=np.float64)
                self.v[name] = np.array(tensors[f"adam.v.{name}"], dtype=np.float64)
        self.step_count = step_count
