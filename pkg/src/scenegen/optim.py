"""Adam with bias correction and a one-cycle cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam over a named parameter dict; moments live alongside the params.

    The update is the standard bias-corrected rule. ``step`` raises if any
    parameter is missing its gradient, so a silently detached parameter
    cannot go stale unnoticed.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"adam step: parameter '{name}' has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment buffers and step counter for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        out["adam.step"] = np.array(self.step_count, dtype=np.int64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name in self.params:
            self.m[name] = np.array(tensors[f"adam.m.{name}"], dtype=np.float32)
            self.v[name] = np.array(tensors[f"adam.v.{name}"], dtype=np.float32)
        self.step_count = int(tensors["adam.step"])


class OneCycle:
    """One-cycle schedule: cosine warmup to ``max_lr``, cosine anneal down.

    Starts at ``max_lr / div_factor``, peaks at ``round(pct_warmup *
    total_steps)``, and ends at ``max_lr / final_div_factor``.
    """

    def __init__(
        self,
        max_lr: float = 1e-4,
        total_steps: int = 1000,
        pct_warmup: float = 0.3,
        div_factor: float = 25.0,
        final_div_factor: float = 1e4,
    ):
        if not 0.0 < pct_warmup < 1.0:
            raise ValueError(f"pct_warmup must be in (0,1), got {pct_warmup}")
        if total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {total_steps}")
        if div_factor <= 1.0 or final_div_factor <= 1.0:
            raise ValueError("div factors must be > 1")
        self.max_lr = max_lr
        self.total_steps = total_steps
        self.pct_warmup = pct_warmup
        self.div_factor = div_factor
        self.final_div_factor = final_div_factor
        self.peak_step = round(pct_warmup * total_steps)

    def lr_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        initial = self.max_lr / self.div_factor
        final = self.max_lr / self.final_div_factor
        peak = self.peak_step
        if step <= peak:
            frac = step / peak if peak > 0 else 1.0
            return initial + (self.max_lr - initial) * 0.5 * (1.0 - math.cos(math.pi * frac))
        frac = (step - peak) / (self.total_steps - peak)
        return final + (self.max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))
