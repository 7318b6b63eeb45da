"""Optimizers: Adam for dense parameters, row-sparse Adagrad for embeddings.

Both are written against :class:`distdnas.tensor.Param` (value + grad pairs)
and share a linear warmup multiplier. Adagrad updates only rows whose
gradient is nonzero, so embedding rows untouched by a batch stay bitwise
identical across a step.
"""

from __future__ import annotations

import numpy as np

from .tensor import Param


class DivergenceError(RuntimeError):
    """Loss became non-finite during an optimization loop."""

    def __init__(self, step: int, context: str = ""):
        where = f" in {context}" if context else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step


def warmup_factor(step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear ramp from 0 to 1 over the first warmup_frac of steps, then 1.

    `step` is 1-based: the first update uses factor 1/warmup_steps.
    """
    warmup_steps = int(round(total_steps * warmup_frac))
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


class Adam:
    def __init__(self, params: list[Param], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.id: np.zeros_like(p.value) for p in self.params}
        self.v = {p.id: np.zeros_like(p.value) for p in self.params}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.id]
            v = self.v[p.id]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.value -= self.lr * lr_scale * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.float64)}
        for i, p in enumerate(self.params):
            out[f"{prefix}.m.{i}"] = self.m[p.id]
            out[f"{prefix}.v.{i}"] = self.v[p.id]
        return out


class SparseAdagrad:
    """Adagrad over embedding tables; touches only rows with nonzero grad."""

    def __init__(self, params: list[Param], lr: float = 0.04, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.eps = eps
        self.acc = {p.id: np.zeros_like(p.value) for p in self.params}

    def step(self, lr_scale: float = 1.0) -> None:
        for p in self.params:
            rows = np.flatnonzero(np.any(p.grad != 0.0, axis=1))
            if rows.size == 0:
                continue
            g = p.grad[rows]
            acc = self.acc[p.id]
            acc[rows] += g * g
            p.value[rows] -= self.lr * lr_scale * g / (np.sqrt(acc[rows]) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.acc.{i}": self.acc[p.id] for i, p in enumerate(self.params)}
