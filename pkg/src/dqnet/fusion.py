"""Cross-model detail querying.

CNN stage features are aligned onto the ViT token grid, fused with the ViT
tokens (window cross attention, or one of the plain element-wise baselines),
and projected back to the CNN feature space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, param, trunc_normal
from .vit import TokenGrid, multi_head_attention

FUSION_MODES = ("rbq", "add", "multiply", "concat")


def window_partition(t: TokenGrid, w: int) -> Tensor:
    """Split the grid into non-overlapping ``w x w`` windows.

    Returns ``[N, n_windows, w*w, D]``; windows are ordered row-major over
    window coordinates and tokens row-major inside each window.
    """
    if w < 1 or t.h % w or t.w % w:
        raise ConfigError(f"window {w} does not divide the {t.h}x{t.w} token grid")
    n, d = t.tokens.shape[0], t.dim
    return (
        t.tokens.reshape(n, t.h // w, w, t.w // w, w, d)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, (t.h // w) * (t.w // w), w * w, d)
    )


def window_merge(windows: Tensor, grid: tuple[int, int], w: int) -> TokenGrid:
    """Inverse of :func:`window_partition`."""
    h, wd = grid
    n, count, size, d = windows.shape
    if h % w or wd % w or count != (h // w) * (wd // w) or size != w * w:
        raise DimensionError(f"{count} windows of {size} tokens do not tile a {h}x{wd} grid with w={w}")
    tokens = (
        windows.reshape(n, h // w, wd // w, w, w, d)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h * wd, d)
    )
    return TokenGrid(tokens, h, wd)


def relative_position_index(w: int) -> np.ndarray:
    """``[w*w, w*w]`` index into a ``(2w-1)^2`` table of relative offsets."""
    ys, xs = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


@dataclass(frozen=True)
class RbqCost:
    """Attention work for one image: score entries and multiply-adds."""

    score_elements: int
    multiply_adds: int


def rbq_cost(grid: tuple[int, int], w: int, dim: int) -> RbqCost:
    """Each of the ``h*w_t`` queries scores ``w^2`` keys: ``O(w^2 h w_t C)``."""
    h, wd = grid
    if w < 1 or h % w or wd % w:
        raise ConfigError(f"window {w} does not divide the {h}x{wd} token grid")
    n = h * wd
    scores = n * w * w
    # Q K^T and the value weighting each cost one multiply-add per score per channel
    return RbqCost(scores, 2 * scores * dim)


class RBQ(Module):
    """Window multi-head cross attention: ViT tokens query aligned CNN tokens.

    Per window: ``Q = Z W_q``, ``K = Y W_k``, ``V = Y W_v``; attention with a
    learned relative-position bias; output projection; then ``+ Z + Y``.
    The output projection and the bias table start at zero, so an untrained
    RBQ returns exactly ``Z + Y``.
    """

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.w_q = param(trunc_normal(rng, (dim, dim)))
        self.w_k = param(trunc_normal(rng, (dim, dim)))
        self.w_v = param(trunc_normal(rng, (dim, dim)))
        self.proj = Linear(dim, dim, rng, init="zeros")
        self.rel_bias = param(np.zeros(((2 * window - 1) ** 2, heads)))
        self._rel_index = relative_position_index(window)
        self.last_probe: dict = {}

    def position_bias(self) -> Tensor:
        size = self.window * self.window
        table = ag.take(self.rel_bias, self._rel_index.reshape(-1), axis=0)
        return table.reshape(size, size, self.heads).transpose(2, 0, 1)

    def forward(self, z: TokenGrid, y: TokenGrid) -> TokenGrid:
        if (z.h, z.w, z.dim) != (y.h, y.w, y.dim) or z.tokens.shape[0] != y.tokens.shape[0]:
            raise DimensionError(f"query grid {z.tokens.shape} and key grid {y.tokens.shape} differ")
        zw = window_partition(z, self.window)
        yw = window_partition(y, self.window)
        probe: dict = {}
        attn = multi_head_attention(
            zw @ self.w_q, yw @ self.w_k, yw @ self.w_v, self.heads, self.position_bias(), probe=probe
        )
        self.last_probe = probe
        out = self.proj(attn) + zw + yw
        return window_merge(out, (z.h, z.w), self.window)


class StageAlign(Module):
    """Maps one CNN stage onto the token grid and back.

    Tokenize: max-pool (stage finer than the grid) or bilinear upsample
    (stage coarser), 1x1 conv to ``D``, LayerNorm. De-tokenize: transposed
    conv restoring scale and width together (or a strided conv for coarser
    stages), then BatchNorm.
    """

    def __init__(self, channels: int, dim: int, stage_stride: int, grid_stride: int, rng: np.random.Generator):
        if stage_stride <= grid_stride:
            if grid_stride % stage_stride:
                raise ConfigError(f"stage stride {stage_stride} does not divide grid stride {grid_stride}")
            self.down = grid_stride // stage_stride
            self.up = 1
        else:
            if stage_stride % grid_stride:
                raise ConfigError(f"grid stride {grid_stride} does not divide stage stride {stage_stride}")
            self.down = 1
            self.up = stage_stride // grid_stride
        self.channels = channels
        self.proj = Conv2d(channels, dim, 1, rng)
        self.norm = LayerNorm(dim)
        # no bias before the BatchNorm: it would be cancelled by the mean subtraction
        if self.up == 1:
            self.restore = ConvTranspose2d(dim, channels, self.down, rng, bias=False)
        else:
            self.restore = Conv2d(dim, channels, self.up, rng, stride=self.up, padding=0, bias=False)
        self.restore_bn = BatchNorm2d(channels)

    def resample(self, r: Tensor, grid: tuple[int, int]) -> Tensor:
        if self.down > 1:
            r = ops.maxpool2d(r, self.down)
        elif self.up > 1:
            r = ops.resize(r, grid, "bilinear")
        if r.shape[-2:] != tuple(grid):
            raise DimensionError(f"resampled stage is {r.shape[-2:]}, token grid is {grid}")
        return r

    def tokenize(self, r: Tensor, grid: tuple[int, int]) -> TokenGrid:
        t = TokenGrid.from_map(self.proj(self.resample(r, grid)))
        return TokenGrid(self.norm(t.tokens), t.h, t.w)

    def detokenize(self, b: TokenGrid) -> Tensor:
        out = self.restore_bn(self.restore(b.to_map()))
        if out.shape[1] != self.channels:
            raise DimensionError(f"restored {out.shape[1]} channels, stage has {self.channels}")
        return out


class Fusion(Module):
    """Combines ViT tokens ``z`` with aligned CNN tokens ``y`` on the token grid."""

    def __init__(self, mode: str, dim: int, heads: int, window: int, rng: np.random.Generator):
        if mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
        self.mode = mode
        if mode == "rbq":
            self.rbq = RBQ(dim, heads, window, rng)
        elif mode == "concat":
            self.merge = Linear(2 * dim, dim, rng)

    def forward(self, z: TokenGrid, y: TokenGrid) -> TokenGrid:
        if self.mode == "rbq":
            return self.rbq(z, y)
        if self.mode == "add":
            out = z.tokens + y.tokens
        elif self.mode == "multiply":
            out = z.tokens * y.tokens
        else:
            out = self.merge(ag.concat([z.tokens, y.tokens], axis=-1))
        return TokenGrid(out, z.h, z.w)
