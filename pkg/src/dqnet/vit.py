"""Plain single-stride vision transformer (no class token)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module, param, trunc_normal


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 128
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class TokenGrid:
    """Tokens ``[N, h*w, D]`` laid out row-major on an ``h x w`` grid."""

    tokens: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.h * self.w:
            raise DimensionError(f"{self.tokens.shape} does not hold a {self.h}x{self.w} grid")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def to_map(self) -> Tensor:
        """``[N, D, h, w]`` view for convolutional consumers."""
        n = self.tokens.shape[0]
        return self.tokens.transpose(0, 2, 1).reshape(n, self.dim, self.h, self.w)

    @classmethod
    def from_map(cls, fmap: Tensor) -> "TokenGrid":
        n, d, h, w = fmap.shape
        return cls(fmap.reshape(n, d, h * w).transpose(0, 2, 1), h, w)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor | None = None, probe=None) -> Tensor:
    """Split ``[..., n, D]`` projections into heads, attend, and re-join."""
    *lead, nq, d = q.shape
    nk = k.shape[-2]
    dh = d // heads
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    qh = q.reshape(*lead, nq, heads, dh).transpose(perm)
    kh = k.reshape(*lead, nk, heads, dh).transpose(perm)
    vh = v.reshape(*lead, nk, heads, dh).transpose(perm)
    out = ops.scaled_dot_attention(qh, kh, vh, bias, probe=probe)
    return out.transpose(perm).reshape(*lead, nq, d)


class TransformerLayer(Module):
    """Pre-norm block: ``a = MSA(LN(z)) + z``; ``z' = MLP(LN(a)) + a``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(round(dim * mlp_ratio))
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng, bias=False)  # a key bias shifts all logits of a query equally and cancels in the softmax
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def attention(self, x: Tensor) -> Tensor:
        return self.proj(multi_head_attention(self.q(x), self.k(x), self.v(x), self.heads))

    def mlp(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))

    def forward(self, z: TokenGrid) -> TokenGrid:
        a = self.attention(self.norm1(z.tokens)) + z.tokens
        out = self.mlp(self.norm2(a)) + a
        return TokenGrid(out, z.h, z.w)


class VisionTransformer(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        self.cfg = cfg
        p, d = cfg.patch_size, cfg.embed_dim
        self.patch_weight = param(trunc_normal(rng, (3 * p * p, d)))
        self.patch_bias = param(np.zeros(d))
        self.pos = param(trunc_normal(rng, (cfg.num_tokens, d)))
        self.layers = [TransformerLayer(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]

    def patch_embed(self, image: Tensor) -> TokenGrid:
        """Flatten non-overlapping ``P x P`` patches, project to ``D``, add positions."""
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
        n, c, h, w = image.shape
        size, p = self.cfg.image_size, self.cfg.patch_size
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
        if (h, w) != (size, size) or c != 3:
            raise DimensionError(f"expected [N,3,{size},{size}] images, got {image.shape}")
        gh, gw = h // p, w // p
        patches = (
            image.reshape(n, c, gh, p, gw, p)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(n, gh * gw, c * p * p)
        )
        tokens = patches @ self.patch_weight + self.patch_bias + self.pos
        return TokenGrid(tokens, gh, gw)

    def forward(self, image: Tensor) -> TokenGrid:
        z = self.patch_embed(image)
        for layer in self.layers:
            z = layer(z)
        return z

    def layer_index(self, name: str) -> int:
        """Depth of a parameter for layer-wise lr decay: embeddings 0, block ``i`` -> ``i+1``."""
        if name.startswith("layers."):
            return int(name.split(".")[1]) + 1
        return 0
