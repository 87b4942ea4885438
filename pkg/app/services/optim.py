"""Adam over the named parameters of a module."""
from __future__ import annotations

import logging

import numpy as np

from app.services.tensor import Module, ShapeError

logger = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam; moments are keyed by parameter path so they checkpoint cleanly."""

    def __init__(
        self,
        module: Module,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = module.named_parameters()
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {path: np.zeros_like(p.data) for path, p in self.params.items()}
        self.v = {path: np.zeros_like(p.data) for path, p in self.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for path, p in self.params.items():
            if p.grad is None:
                continue
            self.m[path] = self.beta1 * self.m[path] + (1.0 - self.beta1) * p.grad
            self.v[path] = self.beta2 * self.v[path] + (1.0 - self.beta2) * (p.grad**2)
            m_hat = self.m[path] / correction1
            v_hat = self.v[path] / correction2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"m.{path}": value.copy() for path, value in self.m.items()}
        state.update({f"v.{path}": value.copy() for path, value in self.v.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], step: int) -> None:
        for path, p in self.params.items():
            for prefix, moments in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{path}"
                if key not in state:
                    raise KeyError(f"optimizer state is missing {key}")
                value = np.asarray(state[key], dtype=np.float64)
                if value.shape != p.shape:
                    raise ShapeError(f"{key}: stored shape {value.shape} != parameter shape {p.shape}")
                moments[path] = value.copy()
        self.t = int(step)
        logger.debug("Restored Adam moments for %d parameters at step %d", len(self.params), self.t)
