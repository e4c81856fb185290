"""AdamW with decoupled weight decay."""

from __future__ import annotations

import logging

import numpy as np

from .config import OptimConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)


class AdamW:
    """p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.

    Parameters with no gradient this step are treated as zero-gradient
    (their moments decay and weight decay still applies).
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], cfg: OptimConfig):
        self.cfg = cfg
        self.params = list(named_params)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float | None = None) -> bool:
        """Apply one update; returns False (and changes nothing) on non-finite grads."""
        cfg = self.cfg
        lr = cfg.lr if lr is None else lr
        grads = {}
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                logger.warning("non-finite gradient in %s; skipping optimizer step", name)
                return False
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in self.params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= (update + lr * cfg.weight_decay * p.data).astype(p.dtype, copy=False)
        return True

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, _ in self.params:
            out[f"optim/m/{name}"] = self.m[name]
            out[f"optim/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params:
            for prefix, store in (("optim/m/", self.m), ("optim/v/", self.v)):
                key = prefix + name
                if key not in arrays:
                    raise ValueError(f"checkpoint is missing optimizer state {key!r}")
                if arrays[key].shape != p.data.shape:
                    raise ValueError(f"optimizer state {key!r} has shape {arrays[key].shape}, expected {p.data.shape}")
                store[name] = arrays[key].astype(p.dtype, copy=True)
        self.step_count = step_count
