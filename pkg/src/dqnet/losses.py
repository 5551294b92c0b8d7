"""Structure-weighted BCE and IoU, the significance-aware multi-scale loss, and their sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .errors import DimensionError, DomainError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    beta: float = 2.0  # significance gain of the multi-scale loss
    lam: float = 5.0  # structural weight gain
    k: int = 7  # neighbourhood for the structural weight (31 at 352px)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("neighbourhood size k must be a positive odd integer")


@dataclass
class LossBreakdown:
    bce: Tensor
    iou: Tensor
    sal: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "l_bce_w": self.bce.item(),
            "l_iou_w": self.iou.item(),
            "l_sal": self.sal.item(),
            "l_total": self.total.item(),
        }


def pixel_weight(mask: np.ndarray, k: int = 7, lam: float = 5.0) -> np.ndarray:
    """``1 + lam * |mean_kxk(G) - G|`` over the last two axes.

    Borders replicate the edge pixel, so a uniform mask gets weight 1 everywhere.
    """
    g = np.asarray(mask, dtype=np.float64)
    size = (1,) * (g.ndim - 2) + (k, k)
    local = ndimage.uniform_filter(g, size=size, mode="nearest")
    return 1.0 + lam * np.abs(local - g)


def _check_prob(p: Tensor) -> None:
    if np.any(p.data < 0) or np.any(p.data > 1) or not np.all(np.isfinite(p.data)):
        raise DomainError("probabilities must lie in [0, 1]")


def _as_mask(mask, like: Tensor) -> Tensor:
    g = np.asarray(mask, dtype=like.dtype)
    if g.shape != like.shape:
        raise DimensionError(f"mask shape {g.shape} != prediction shape {like.shape}")
    return Tensor(g)


def bce_map(p: Tensor, g: Tensor) -> Tensor:
    """Per-pixel binary cross-entropy with probabilities clamped to ``[1e-7, 1-1e-7]``."""
    pc = ag.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(g * ag.log(pc) + (1.0 - g) * ag.log(1.0 - pc))


def _per_image_mean(x: Tensor) -> Tensor:
    """Average per-image scalars ``[..., ]`` into one scalar (identity for a single image)."""
    return x.mean() if x.ndim else x


def weighted_bce(p: Tensor, mask, weight: np.ndarray) -> Tensor:
    """``sum(w * bce) / sum(w)`` per image, averaged over the batch."""
    p = ag.as_tensor(p)
    _check_prob(p)
    g = _as_mask(mask, p)
    w = Tensor(np.asarray(weight, dtype=p.dtype))
    num = (w * bce_map(p, g)).sum(axis=(-2, -1))
    return _per_image_mean(num / w.data.sum(axis=(-2, -1)))


def weighted_iou(p: Tensor, mask, weight: np.ndarray) -> Tensor:
    """Soft IoU loss with structural weights and +1 smoothing."""
    p = ag.as_tensor(p)
    _check_prob(p)
    g = _as_mask(mask, p)
    w = Tensor(np.asarray(weight, dtype=p.dtype))
    inter = (w * p * g).sum(axis=(-2, -1))
    union = (w * (p + g)).sum(axis=(-2, -1))
    return _per_image_mean(1.0 - (inter + 1.0) / (union - inter + 1.0))


def significance(b: Tensor, size: tuple[int, int]) -> Tensor:
    """``sigmoid(upsample(channel-mean |B|))``, shape ``[N, H, W]``; values in ``[0.5, 1)``."""
    if b.ndim != 4:
        raise DimensionError(f"enhanced feature must be [N,C,H,W], got {b.shape}")
    mag = ag.tabs(b).mean(axis=1)
    return ag.sigmoid(ops.resize(mag, size, "bilinear"))


def sal(aux: Sequence[Tensor], enhanced: Sequence[Tensor], mask, beta: float = 2.0) -> Tensor:
    """Significance-aware loss over all enhanced scales.

    ``aux[s]`` are probabilities ``[N, H, W]`` at mask resolution and
    ``enhanced[s]`` the matching ``[N, C, h, w]`` enhanced features.
    """
    if len(aux) != len(enhanced):
        raise DimensionError(f"{len(aux)} auxiliary predictions for {len(enhanced)} enhanced features")
    if not aux:
        raise DimensionError("sal needs at least one scale")
    num = den = None
    for p, b in zip(aux, enhanced):
        p = ag.as_tensor(p)
        _check_prob(p)
        g = _as_mask(mask, p)
        weight = 1.0 + beta * significance(b, p.shape[-2:])
        n = (weight * bce_map(p, g)).sum(axis=(-2, -1))
        d = weight.sum(axis=(-2, -1))
        num = n if num is None else num + n
        den = d if den is None else den + d
    return _per_image_mean(num / den)


def total_loss(
    logits: Tensor,
    aux: Sequence[Tensor],
    enhanced: Sequence[Tensor],
    mask,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Weighted BCE + weighted IoU on ``sigmoid(logits)`` plus the multi-scale loss."""
    if logits.ndim == 4:
        logits = logits.reshape(logits.shape[0], *logits.shape[2:])
    p = ag.sigmoid(logits)
    g = np.asarray(mask)
    weight = pixel_weight(g, cfg.k, cfg.lam)
    bce = weighted_bce(p, g, weight)
    iou = weighted_iou(p, g, weight)
    if aux:
        s = sal(aux, enhanced, g, cfg.beta)
    else:
        s = Tensor(np.zeros((), dtype=logits.dtype))
    return LossBreakdown(bce, iou, s, bce + iou + s)
