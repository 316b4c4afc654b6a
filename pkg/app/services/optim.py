"""AdamW with decoupled weight decay and global gradient-norm clipping, on named numpy arrays."""

from typing import Dict, Iterable, Mapping

import numpy as np

from app.config import GRAD_CLIP, WEIGHT_DECAY
from app.errors import ContractError


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float = GRAD_CLIP) -> Dict[str, np.ndarray]:
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


class AdamW:
    """
    Updates only the names it was built with.

    Biases (``*.bias``) are not decayed.
    """

    def __init__(
        self,
        names: Iterable[str],
        lr: float,
        weight_decay: float = WEIGHT_DECAY,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ContractError(f"AdamW: learning rate must be positive, got {lr}")
        self.names = sorted(names)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """In-place update of ``params`` for every managed name present in ``grads``."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p = params[name]
            if self.weight_decay and not name.endswith(".bias"):
                p = p * (1.0 - self.lr * self.weight_decay)
            params[name] = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
