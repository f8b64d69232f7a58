"""Adam with linear warmup and name-prefix parameter freezing.

Freezing skips the whole update for a parameter, moments included, so a
frozen parameter's optimizer state stays exactly zero and its data stays
bit-identical however many steps run.  The step count is global; bias
correction uses it for every parameter.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 warmup_steps: int = 0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {warmup_steps}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.warmup_steps = int(warmup_steps)
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def current_lr(self) -> float:
        """Linear ramp over the first warmup_steps updates, then constant."""
        if self.warmup_steps and self.step_count < self.warmup_steps:
            return self.lr * (self.step_count + 1) / self.warmup_steps
        return self.lr

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, frozen_prefixes: tuple[str, ...] = ()):
        lr = self.current_lr()
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if any(name.startswith(pre) for pre in frozen_prefixes):
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"step_count": self.step_count,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict):
        if set(state["m"]) != set(self.m) or set(state["v"]) != set(self.v):
            raise ValueError("optimizer state names do not match parameters")
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], np.float32)
            self.v[k] = np.array(state["v"][k], np.float32)
