"""Tiny four-stage convolutional encoder emitting a stride-4/8/16/32 pyramid.

Two independently parameterized instances form the duplex encoder, one for the
RGB image and one for the surface-normal image. The pyramid contract (level i
at stride 2**(i+1) with channel schedule C_i) is what downstream modules
consume, so any encoder honoring it can be swapped in.
"""

from dataclasses import dataclass, field
from typing import List

import torch
import torch.nn as nn

from .errors import ConfigurationError, InputError

MAX_STRIDE = 32


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    channel_schedule: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: List[int] = field(default_factory=lambda: [1, 1, 1, 1])

    def __post_init__(self):
        k = len(self.channel_schedule)
        if len(self.blocks_per_stage) != k:
            raise ConfigurationError(
                f"blocks_per_stage has length {len(self.blocks_per_stage)}, expected {k}"
            )
        if self.stem_channels <= 0 or any(c <= 0 for c in self.channel_schedule):
            raise ConfigurationError("channel counts must be positive")
        if any(b <= 0 for b in self.blocks_per_stage):
            raise ConfigurationError("blocks_per_stage entries must be positive")
        if any(a > b for a, b in zip(self.channel_schedule, self.channel_schedule[1:])):
            raise ConfigurationError(f"channel schedule must be non-decreasing, got {self.channel_schedule}")

    @property
    def num_stages(self) -> int:
        return len(self.channel_schedule)


class ChannelNorm(nn.Module):
    """Normalize each channel over its spatial positions, with learnable affine.

    Batch-size-1 friendly: statistics are per sample and per channel, no
    running averages.
    """

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):  # (B, C, H, W)
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class ResidualBlock(nn.Module):
    """Pre-norm residual block: x + conv3x3(gelu(conv3x3(norm(x))))."""

    def __init__(self, channels):
        super().__init__()
        self.norm = ChannelNorm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.GELU()

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(self.norm(x))))


class Backbone(nn.Module):
    """Stride-4 stem followed by three stride-2 downsampling stages."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channel_schedule
        self.stem_conv = nn.Conv2d(3, cfg.stem_channels, kernel_size=4, stride=4)
        self.stem_norm = ChannelNorm(cfg.stem_channels)
        self.stem_proj = (
            nn.Conv2d(cfg.stem_channels, c[0], 1) if cfg.stem_channels != c[0] else nn.Identity()
        )
        self.downsamples = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i in range(cfg.num_stages):
            if i > 0:
                self.downsamples.append(
                    nn.Sequential(ChannelNorm(c[i - 1]), nn.Conv2d(c[i - 1], c[i], 2, stride=2))
                )
            self.stages.append(nn.Sequential(*[ResidualBlock(c[i]) for _ in range(cfg.blocks_per_stage[i])]))

    @property
    def out_channels(self) -> List[int]:
        return list(self.cfg.channel_schedule)

    def forward(self, img: torch.Tensor) -> List[torch.Tensor]:
        """Return the k-level pyramid; level i has stride 2**(i+1)."""
        if img.ndim != 4 or img.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W) input, got {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if h % MAX_STRIDE or w % MAX_STRIDE:
            raise InputError(f"input dims must be divisible by {MAX_STRIDE}, got {h}x{w}")
        x = self.stem_proj(self.stem_norm(self.stem_conv(img)))
        features = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.downsamples[i - 1](x)
            x = stage(x)
            features.append(x)
        return features


def build_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    """Construct a backbone with parameters drawn deterministically from seed."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        bk = Backbone(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return bk


def check_pyramid(features: List[torch.Tensor], h: int, w: int) -> None:
    """Assert the stride contract on a pyramid produced for an HxW input."""
    for i, f in enumerate(features):
        stride = 2 ** (i + 2)
        expect = (h // stride, w // stride)
        if tuple(f.shape[-2:]) != expect:
            raise InputError(
                f"level {i} has spatial dims {tuple(f.shape[-2:])}, expected {expect} at stride {stride}"
            )
