"""Small convolutional backbone with the receptive enhancement stage."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .deformable import EncoderMemory, token_positions

PYRAMID_STRIDES = (8, 16, 32, 64)


def _norm(channels: int) -> nn.GroupNorm:
    groups = math.gcd(8, channels)
    return nn.GroupNorm(groups, channels)


def conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        _norm(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        _norm(cout),
        nn.ReLU(inplace=True),
    )


@dataclass
class FeaturePyramid:
    """Four ``(B, C, H, W)`` maps at strides 8, 16, 32 and 64."""

    levels: list[torch.Tensor]
    padded_hw: tuple[int, int]
    image_hw: tuple[int, int]

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        return [tuple(m.shape[-2:]) for m in self.levels]

    def flatten(self) -> EncoderMemory:
        tokens = torch.cat([m.flatten(2).transpose(1, 2) for m in self.levels], dim=1)
        positions, level_ids = token_positions(self.level_shapes, device=tokens.device, dtype=tokens.dtype)
        return EncoderMemory(tokens, positions, level_ids, self.level_shapes)


class Backbone(nn.Module):
    """Stem plus four stride-2 stages; the last three feed the pyramid and the
    stride-32 output also feeds the receptive enhancement conv (one more stride-2 step)."""

    def __init__(self, channels=(32, 64, 128, 256), dim: int = 64, stem_channels: int = 16):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("backbone needs exactly 4 stage widths")
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_channels, 3, stride=2, padding=1, bias=False),
            _norm(stem_channels),
            nn.ReLU(inplace=True),
        )
        widths = [stem_channels, *channels]
        self.stages = nn.ModuleList(conv_block(widths[i], widths[i + 1], 2) for i in range(4))
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, dim, 1), _norm(dim)) for c in channels[1:]
        )
        self.rem = nn.Sequential(
            nn.Conv2d(channels[-1], dim, 3, stride=2, padding=1),
            _norm(dim),
            nn.ReLU(inplace=True),
        )
        self.register_buffer("pixel_mean", torch.tensor([0.5, 0.5, 0.5]).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor([0.25, 0.25, 0.25]).view(1, 3, 1, 1), persistent=False)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        """``images`` is ``(B, 3, H, W)`` in [0, 1]; zero-padded to a multiple of 64 if needed."""
        h, w = images.shape[-2:]
        ph, pw = -h % 64, -w % 64
        x = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        levels = [proj(f) for proj, f in zip(self.input_proj, feats[1:])]
        levels.append(self.rem(feats[-1]))
        return FeaturePyramid(levels, (h + ph, w + pw), (h, w))
