"""Poly learning-rate schedule and AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from ..autograd import Tensor


def poly_lr(step: int, max_steps: int, lr0: float, power: float = 0.9) -> float:
    """``lr0 * (1 - step / max_steps) ** power``; zero at and beyond ``max_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= max_steps:
        return 0.0
    return lr0 * (1.0 - step / max_steps) ** power


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices and kernels.

    ``scales`` holds optional per-parameter learning-rate factors (used for
    layer-wise decay); biases, norms and other 1-D parameters are not decayed.
    """

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        scales: dict[str, float] | None = None,
    ):
        self.params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.scales = scales or {}
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            rate = lr * self.scales.get(name, 1.0)
            if rate == 0.0:
                continue
            if self.weight_decay and p.ndim >= 2:
                p.data -= rate * self.weight_decay * p.data
            p.data -= (rate * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], t: int) -> None:
        for name, _ in self.params:
            self.m[name][...] = state[f"adam.m/{name}"]
            self.v[name][...] = state[f"adam.v/{name}"]
        self.t = t


def layer_decay_scales(model, decay: float | None) -> dict[str, float]:
    """``decay ** (depth - d)`` for ViT parameters at depth ``d``; other parameters keep factor 1."""
    if decay is None:
        return {}
    depth = model.cfg.vit.depth
    return {
        f"vit.{name}": decay ** (depth - model.vit.layer_index(name))
        for name, _ in model.vit.named_parameters()
    }
