"""Adam optimizer with bias correction, one instance per parameter group."""
from __future__ import annotations

import math

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in parameter {param_name!r}")
        self.param_name = param_name


class Adam:
    """Standard Adam: m and v moment buffers, bias-corrected update.

    The step aborts before touching any parameter if a gradient contains a
    non-finite entry, so a failed step leaves the state untouched.
    """

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer group")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            # the sum is non-finite iff some entry is
            if not np.isfinite(np.sum(p.grad)):
                raise NonFiniteGradient(p.name)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        scale = self.lr / bc1
        inv_sqrt_bc2 = 1.0 / math.sqrt(bc2)
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v)
            denom *= inv_sqrt_bc2
            denom += self.eps
            update = m / denom
            update *= scale
            p.value -= update

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self.m) or set(state["v"]) != set(self.v):
            raise ValueError("optimizer state does not match parameter group")
        self.t = int(state["t"])
        for k in self.m:
            if state["m"][k].shape != self.m[k].shape:
                raise ValueError(f"shape mismatch restoring moment for {k!r}")
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)
