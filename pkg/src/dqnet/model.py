"""End-to-end detail-querying network: ViT + CNN + per-stage fusion + pyramid decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .cnn import STAGES, CnnConfig, FeatureMap, ResNet
from .errors import ConfigError, DimensionError
from .fusion import FUSION_MODES, Fusion, StageAlign
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, rng_stream
from .vit import TokenGrid, VisionTransformer, VitConfig


@dataclass(frozen=True)
class ModelConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    window: int = 4
    stages: tuple[int, ...] = STAGES
    decoder_width: int = 256
    fusion: str = "rbq"  # one of FUSION_MODES, or "none"
    rbq_heads: int | None = None

    def __post_init__(self):
        size = self.vit.image_size
        if size % 32:
            raise ConfigError(f"image size {size} must be divisible by 32")
        if self.fusion != "none" and self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if any(s not in STAGES for s in self.stages) or len(set(self.stages)) != len(self.stages):
            raise ConfigError(f"enhanced stages must be distinct members of {STAGES}")
        if self.fusion != "none" and not self.stages:
            raise ConfigError("an active fusion mode needs at least one enhanced stage")
        if self.fusion == "rbq" and self.vit.grid % self.window:
            raise ConfigError(f"window {self.window} does not divide the {self.vit.grid}x{self.vit.grid} token grid")
        if self.vit.embed_dim % self.heads:
            raise ConfigError(f"embed dim not divisible by {self.heads} RBQ heads")
        if self.decoder_width < 1:
            raise ConfigError("decoder width must be positive")

    @property
    def heads(self) -> int:
        return self.rbq_heads or self.vit.heads

    @property
    def enhanced(self) -> tuple[int, ...]:
        return () if self.fusion == "none" else tuple(sorted(self.stages))

    @property
    def grid_stride(self) -> int:
        return self.vit.patch_size


@dataclass
class ForwardOutput:
    logits: Tensor  # [N, 1, H, W], pre-sigmoid
    aux: dict[int, Tensor]  # stage -> [N, H, W] probabilities
    enhanced: dict[int, Tensor]  # stage -> B_s, [N, C_s, H_s, W_s]
    vit: TokenGrid
    stage_inputs: dict[int, Tensor]  # stage -> tensor fed to C_s
    raw: dict[int, Tensor]  # stage -> R_s before enhancement

    @property
    def probabilities(self) -> np.ndarray:
        from scipy.special import expit

        return expit(self.logits.data[:, 0])


class Decoder(Module):
    """Lateral 1x1 convs, one-step top-down deconvolution, concat at 1/4 scale, head.

    ``H1 = V~``, ``H_i = B~_i + Up(B~_{i+1})`` for the stage pairs (2,3), (3,4),
    (4,5); all four are resampled to the 1/4-scale grid, concatenated, fused by
    a 3x3 conv, upsampled to the image size, and projected to one channel.
    """

    def __init__(self, stage_widths: dict[int, int], vit_dim: int, width: int, rng: np.random.Generator):
        self.lateral = {s: Conv2d(c, width, 1, rng) for s, c in stage_widths.items()}
        self.vit_lateral = Conv2d(vit_dim, width, 1, rng)
        self.up = {s: ConvTranspose2d(width, width, 2, rng) for s in (3, 4, 5)}
        self.fuse = Conv2d(4 * width, width, 3, rng, bias=False)
        self.fuse_bn = BatchNorm2d(width)
        self.head = Conv2d(width, 1, 3, rng)

    def pyramid(self, feats: dict[int, Tensor], vit_map: Tensor) -> list[Tensor]:
        lat = {s: self.lateral[s](feats[s]) for s in STAGES}
        levels = [self.vit_lateral(vit_map)]
        for s in (2, 3, 4):
            up = self.up[s + 1](lat[s + 1])
            if up.shape != lat[s].shape:
                raise DimensionError(f"stage {s} is {lat[s].shape}, upsampled stage {s + 1} is {up.shape}")
            levels.append(lat[s] + up)
        return levels

    def forward(self, feats: dict[int, Tensor], vit_map: Tensor, out_size: tuple[int, int]) -> Tensor:
        levels = self.pyramid(feats, vit_map)
        target = levels[1].shape[-2:]
        aligned = [ops.resize(h, target, "bilinear") for h in levels]
        x = ag.relu(self.fuse_bn(self.fuse(ag.concat(aligned, axis=1))))
        return self.head(ops.resize(x, out_size, "bilinear"))


class AuxHead(Module):
    """1x1 conv to one channel, bilinear upsample to mask size, sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, 1, 1, rng)

    def forward(self, b: Tensor, size: tuple[int, int]) -> Tensor:
        x = self.conv(b)
        x = x.reshape(x.shape[0], *x.shape[2:])
        return ag.sigmoid(ops.resize(x, size, "bilinear"))


class DQNet(Module):
    """Algorithm: ``V1 = T(I)``; for each stage ``R_i = C_i(B_{i-1})``, ``B_i = Q(V1, R_i)``.

    Stages not in ``cfg.stages`` pass ``R_i`` through unchanged. Each
    component draws its initial weights from its own named random stream.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        d = cfg.vit.embed_dim
        self.vit = VisionTransformer(cfg.vit, rng_stream(seed, "vit"))
        self.cnn = ResNet(cfg.cnn, rng_stream(seed, "cnn"))
        self.align = {}
        self.fusion = {}
        self.aux = {}
        for s in cfg.enhanced:
            width = cfg.cnn.width(s)
            self.align[s] = StageAlign(width, d, CnnConfig.stride(s), cfg.grid_stride, rng_stream(seed, f"align{s}"))
            self.fusion[s] = Fusion(cfg.fusion, d, cfg.heads, cfg.window, rng_stream(seed, f"fusion{s}"))
            self.aux[s] = AuxHead(width, rng_stream(seed, f"aux{s}"))
        widths = {s: cfg.cnn.width(s) for s in STAGES}
        self.decoder = Decoder(widths, d, cfg.decoder_width, rng_stream(seed, "decoder"))

    def enhance(self, stage: int, r: Tensor, v1: TokenGrid) -> Tensor:
        """``B = de-align(fuse(V1, align(R)))`` for one stage."""
        y = self.align[stage].tokenize(r, (v1.h, v1.w))
        return self.align[stage].detokenize(self.fusion[stage](v1, y))

    def forward(self, images) -> ForwardOutput:
        images = ag.as_tensor(images)
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        size = self.cfg.vit.image_size
        if images.shape[1:] != (3, size, size):
            raise DimensionError(f"expected [N,3,{size},{size}] images, got {images.shape}")
        v1 = self.vit(images)
        x = self.cnn.stem(images)
        stage_inputs, raw, feats = {}, {}, {}
        for s in STAGES:
            stage_inputs[s] = x.values
            r = self.cnn.stage_forward(s, x)
            raw[s] = r.values
            b = self.enhance(s, r.values, v1) if s in self.align else r.values
            feats[s] = b
            x = FeatureMap(b, r.stride)
        logits = self.decoder(feats, v1.to_map(), (size, size))
        aux = {s: self.aux[s](feats[s], (size, size)) for s in self.align}
        enhanced = {s: feats[s] for s in self.align}
        return ForwardOutput(logits, aux, enhanced, v1, stage_inputs, raw)

    def predict(self, images) -> np.ndarray:
        """Foreground probabilities ``[N, H, W]`` in eval mode without graph recording."""
        was = self.training
        self.eval()
        try:
            with ag.no_grad():
                return self.forward(images).probabilities
        finally:
            self.train(was)
