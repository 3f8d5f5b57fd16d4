"""Four-stage residual backbone.

Stage contract: the stem brings the input to 1/4 resolution, stage 1 keeps it
there, stage 2 strides to 1/8, and stages 3 and 4 stay at 1/8 with dilation 2
and 4 (padding equals dilation, so the extent is preserved).  The four stage
outputs form the multi-level feature set that the rest of the network fuses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, Ctx, EVAL, Module
from .tensor import Tensor

STAGE_STRIDES = (1, 2, 1, 1)
STAGE_DILATIONS = (1, 1, 2, 4)
STEM_STRIDE = 4


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels needs four positive widths, got {self.stage_channels}")
        if len(self.blocks_per_stage) != 4 or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(f"blocks_per_stage needs four positive counts, got {self.blocks_per_stage}")


class ResidualBlock(Module):
    """Two 3x3 conv+norm layers with a ReLU joint and an identity or 1x1-projected skip."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, dtype=np.float32):
        pad = dilation
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, dilation=dilation, padding=pad, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, dilation=dilation, padding=pad, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if cin != cout or stride != 1:
            self.skip_conv = Conv2d(cin, cout, 1, rng, stride=stride, dtype=dtype)
            self.skip_bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.skip_conv = None
            self.skip_bn = None

    def forward(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        h = T.relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        h = self.bn2.forward(self.conv2.forward(h, ctx), ctx)
        skip = x if self.skip_conv is None else self.skip_bn.forward(self.skip_conv.forward(x, ctx), ctx)
        return T.relu(h + skip)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c0 = cfg.stage_channels[0]
        # two stride-2 convs reach the stage-1 resolution of 1/4
        self.stem1 = ConvBNReLU(3, c0, rng, stride=2, dtype=dtype)
        self.stem2 = ConvBNReLU(c0, c0, rng, stride=2, dtype=dtype)
        self.stages: list[list[ResidualBlock]] = []
        cin = c0
        for cout, blocks, stride, dilation in zip(cfg.stage_channels, cfg.blocks_per_stage,
                                                  STAGE_STRIDES, STAGE_DILATIONS):
            stage = []
            for b in range(blocks):
                stage.append(ResidualBlock(cin, cout, rng, stride=stride if b == 0 else 1,
                                           dilation=dilation, dtype=dtype))
                cin = cout
            self.stages.append(stage)

    def forward(self, img: Tensor, ctx: Ctx = EVAL) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Stage outputs at 1/4, 1/8, 1/8, 1/8 of the input extent."""
        if img.ndim != 4 or img.shape[1] != 3:
            raise ConfigError(f"backbone expects a B,3,H,W image batch, got {img.shape}")
        h, w = img.shape[2], img.shape[3]
        if h % 8 != 0 or w % 8 != 0:
            raise ConfigError(f"input extent ({h},{w}) must be divisible by 8")
        x = self.stem2.forward(self.stem1.forward(img, ctx), ctx)
        outs = []
        for stage in self.stages:
            for block in stage:
                x = block.forward(x, ctx)
            outs.append(x)
        return tuple(outs)


def backbone_forward(img: Tensor, backbone: Backbone, ctx: Ctx = EVAL):
    return backbone.forward(img, ctx)
