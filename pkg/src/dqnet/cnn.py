"""Five-stage residual CNN whose stage inputs can be replaced in-line."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module

STAGES = (2, 3, 4, 5)


@dataclass(frozen=True)
class CnnConfig:
    """Stage widths ``c1..c5`` and residual blocks for stages 2..5.

    ``block="bottleneck"`` gives the ResNet-50 layout (widths are then the
    stage output widths, with a 4x narrower inner width).
    """

    widths: tuple[int, ...] = (16, 16, 32, 64, 128)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    stem_stride: int = 2
    block: str = "basic"

    def __post_init__(self):
        if len(self.widths) != 5 or len(self.blocks) != 4:
            raise ConfigError("need 5 stage widths and 4 block counts")
        if self.stem_stride != 2:
            raise ConfigError("the stem must halve the resolution (stage scales 1/2 .. 1/32)")
        if any(b < 1 for b in self.blocks) or any(c < 1 for c in self.widths):
            raise ConfigError("widths and block counts must be positive")
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block type {self.block!r}")

    def width(self, stage: int) -> int:
        return self.widths[stage - 1]

    @staticmethod
    def stride(stage: int) -> int:
        """Downsampling factor of stage ``stage`` relative to the input image."""
        return 2**stage


@dataclass
class FeatureMap:
    """``[N, C, H, W]`` CNN feature at ``1/stride`` of the input resolution."""

    values: Tensor
    stride: int

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]


class BasicBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm2d(c_out)

    def identity_path(self, x: Tensor) -> Tensor:
        return x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))

    def residual(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(ag.relu(self.bn1(self.conv1(x)))))

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(self.residual(x) + self.identity_path(x))


class Bottleneck(BasicBlock):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        inner = max(c_out // 4, 1)
        self.conv1 = Conv2d(c_in, inner, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(inner)
        self.conv2 = Conv2d(inner, inner, 3, rng, stride=stride, bias=False)
        self.bn2 = BatchNorm2d(inner)
        self.conv3 = Conv2d(inner, c_out, 1, rng, bias=False)
        self.bn3 = BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm2d(c_out)

    def residual(self, x: Tensor) -> Tensor:
        h = ag.relu(self.bn1(self.conv1(x)))
        h = ag.relu(self.bn2(self.conv2(h)))
        return self.bn3(self.conv3(h))


class ResNet(Module):
    """Stem (stage 1, 1/2 scale) followed by stages 2..5, each halving resolution."""

    def __init__(self, cfg: CnnConfig, rng: np.random.Generator):
        self.cfg = cfg
        block = BasicBlock if cfg.block == "basic" else Bottleneck
        self.stem_conv = Conv2d(3, cfg.width(1), 3, rng, bias=False)
        self.stem_bn = BatchNorm2d(cfg.width(1))
        self.stages = []
        for s, count in zip(STAGES, cfg.blocks):
            c_in = cfg.width(s - 1)
            blocks = []
            for b in range(count):
                blocks.append(block(c_in if b == 0 else cfg.width(s), cfg.width(s), 2 if b == 0 else 1, rng))
            self.stages.append(blocks)

    def stem(self, image: Tensor) -> FeatureMap:
        """conv3x3 -> BN -> ReLU -> 2x2 max-pool: the 1/2-scale feature ``R_1``."""
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
        h = ag.relu(self.stem_bn(self.stem_conv(image)))
        return FeatureMap(ops.maxpool2d(h, 2), 2)

    def stage_forward(self, stage: int, x: FeatureMap) -> FeatureMap:
        """``R_i = C_i(B_{i-1})`` for ``stage`` in 2..5."""
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        expected = self.cfg.width(stage - 1)
        if x.channels != expected:
            raise DimensionError(f"stage {stage} expects {expected} input channels, got {x.channels}")
        h = x.values
        for block in self.stages[stage - 2]:
            h = block(h)
        return FeatureMap(h, x.stride * 2)

    def forward(self, image: Tensor) -> dict[int, FeatureMap]:
        feats = {1: self.stem(image)}
        for s in STAGES:
            feats[s] = self.stage_forward(s, feats[s - 1])
        return feats
