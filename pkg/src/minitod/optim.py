"""Decoupled-weight-decay adaptive-moment optimizer with a linear warmup/decay
learning-rate schedule, written against flat float64 parameter vectors."""

from __future__ import annotations

import json

import numpy as np


class NumericsError(RuntimeError):
    """A non-finite gradient reached the optimizer; training must abort."""


class AdamW:
    def __init__(self, n_params: int, lr_max: float, total_steps: int,
                 warmup_frac: float = 0.2, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if not 0.0 <= warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        self.m = np.zeros(n_params, dtype=np.float64)
        self.v = np.zeros(n_params, dtype=np.float64)
        self.step_count = 0
        self.lr_max = lr_max
        self.total_steps = total_steps
        self.warmup_frac = warmup_frac
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay

    def lr(self, step: int) -> float:
        """Linear ramp to lr_max over the warmup span, then linear decay to 0.

        ``step`` counts updates starting at 1.
        """
        warm = self.warmup_frac * self.total_steps
        if step <= warm:
            return self.lr_max * step / max(warm, 1.0)
        remain = max(self.total_steps - step, 0.0)
        return self.lr_max * remain / max(self.total_steps - warm, 1.0)

    def update(self, params: np.ndarray, grad: np.ndarray) -> float:
        """Apply one descent step in place; ``grad`` is the loss gradient."""
        if grad.shape != params.shape:
            raise ValueError("gradient and parameter shapes differ")
        if not np.all(np.isfinite(grad)):
            raise NumericsError("non-finite gradient")
        self.step_count += 1
        lr = self.lr(self.step_count)
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.step_count)
        vhat = self.v / (1.0 - self.beta2 ** self.step_count)
        params -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * params)
        return lr

    def to_dict(self) -> dict:
        return {
            "m": self.m.tolist(),
            "v": self.v.tolist(),
            "step_count": self.step_count,
            "lr_max": self.lr_max,
            "total_steps": self.total_steps,
            "warmup_frac": self.warmup_frac,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_dict(cls, d: dict) -> "AdamW":
        opt = cls(len(d["m"]), d["lr_max"], d["total_steps"], d["warmup_frac"],
                  d["beta1"], d["beta2"], d["eps"], d["weight_decay"])
        opt.m[...] = d["m"]
        opt.v[...] = d["v"]
        opt.step_count = d["step_count"]
        return opt

    @classmethod
    def load(cls, path) -> "AdamW":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))
