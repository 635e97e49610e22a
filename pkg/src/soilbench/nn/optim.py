"""Adam with bias correction."""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from .tensor import DTYPE, Parameter

DEFAULT_LR = 0.0005


class Adam:
    def __init__(self, named_params, lr: float = DEFAULT_LR, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: dict[str, Parameter] = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape, dtype=DTYPE) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape, dtype=DTYPE) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        # check everything first so a bad gradient leaves parameters untouched
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericalError(
                    f"non-finite gradient for parameter {name!r} at step {self.step_count + 1} "
                    f"(max |g| = {np.nanmax(np.abs(p.grad))})")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape, dtype=DTYPE)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(DTYPE)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m/{k}"] = self.m[k].copy()
            out[f"adam.v/{k}"] = self.v[k].copy()
        out["adam.step"] = np.array([self.step_count], dtype=DTYPE)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = np.asarray(state[f"adam.m/{k}"], dtype=DTYPE).copy()
            self.v[k] = np.asarray(state[f"adam.v/{k}"], dtype=DTYPE).copy()
        self.step_count = int(np.asarray(state["adam.step"]).reshape(-1)[0])

