"""Per-scale fusion of the two encoder pyramids.

The fusion stage stacks the RGB and normal feature maps channel-wise and runs
channel self-attention over the 2C x P matrix of flattened spatial positions;
a learnable scalar (initialized to zero) gates how much attention output is
admitted on top of the plain concatenation. The recalibration stage weights
channels by a sigmoid gate computed from global average pooling, adds the
gated tensor back residually, and mixes with a pointwise convolution.

Ablation modes: plain concatenation, a classic squeeze-and-excitation block,
either stage alone, or both stages composed (the default).
"""

from typing import List

import torch
import torch.nn as nn

from .errors import ConfigurationError, InputError

FUSION_MODES = ("concat", "seb", "hffm", "ffrm", "hffm+ffrm")


class ChannelAttentionFusion(nn.Module):
    """Channel self-attention over the concatenated modality features.

    Query, key, and value are all the identical 2C x P matrix; the 2C x 2C
    affinity is softmax-normalized over key channels. kappa starts at zero so
    the module begins as normalized concatenation and learns to admit the
    attention path.
    """

    def __init__(self, channels):
        super().__init__()
        self.channels = channels  # per-modality channel count C
        self.kappa = nn.Parameter(torch.zeros(()))
        self.norm_scale = nn.Parameter(torch.ones(2 * channels))
        self.norm_shift = nn.Parameter(torch.zeros(2 * channels))
        self.norm_eps = 1e-5

    def forward(self, fr: torch.Tensor, fn: torch.Tensor) -> torch.Tensor:
        if fr.shape != fn.shape:
            raise InputError(f"modality features disagree: {tuple(fr.shape)} vs {tuple(fn.shape)}")
        b, c, h, w = fr.shape
        fc = torch.cat([fr, fn], dim=1).reshape(b, 2 * c, h * w)  # (B, 2C, P)
        attn = torch.softmax(fc @ fc.transpose(1, 2), dim=-1)  # (B, 2C, 2C)
        out = attn @ (self.kappa * fc) + fc
        mean = out.mean(dim=-1, keepdim=True)
        var = out.var(dim=-1, keepdim=True, unbiased=False)
        out = (out - mean) / torch.sqrt(var + self.norm_eps)
        out = out * self.norm_scale[None, :, None] + self.norm_shift[None, :, None]
        return out.reshape(b, 2 * c, h, w)


class GatedRecalibration(nn.Module):
    """Global-pooled sigmoid channel gate with residual add and 1x1 mixing."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels  # fused channel count 2C
        self.gate_conv = nn.Conv2d(channels, channels, 1)
        self.out_conv = nn.Conv2d(channels, channels, 1)

    def forward(self, fh: torch.Tensor) -> torch.Tensor:
        if fh.shape[1] != self.channels:
            raise ConfigurationError(f"expected {self.channels} channels, got {fh.shape[1]}")
        z = fh.mean(dim=(2, 3), keepdim=True)  # (B, 2C, 1, 1)
        gate = torch.sigmoid(self.gate_conv(z))
        return self.out_conv(fh + gate * fh)


class SqueezeExcitation(nn.Module):
    """Classic squeeze-and-excitation with channel reduction, for ablation."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.fc(x.mean(dim=(2, 3), keepdim=True))


class FusionBlock(nn.Module):
    """Apply the configured fusion mode independently at every pyramid level.

    Every mode takes per-level (C_i, C_i) modality features and emits 2*C_i
    fused channels, so the downstream channel-reduction contract is identical
    across ablations.
    """

    def __init__(self, level_channels: List[int], mode: str = "hffm+ffrm"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion mode {mode!r} not in {FUSION_MODES}")
        self.mode = mode
        self.level_channels = list(level_channels)
        if mode in ("hffm", "hffm+ffrm"):
            self.attn = nn.ModuleList(ChannelAttentionFusion(c) for c in level_channels)
        if mode in ("ffrm", "hffm+ffrm"):
            self.recal = nn.ModuleList(GatedRecalibration(2 * c) for c in level_channels)
        if mode == "seb":
            self.seb = nn.ModuleList(SqueezeExcitation(2 * c) for c in level_channels)

    @property
    def out_channels(self) -> List[int]:
        return [2 * c for c in self.level_channels]

    def forward(self, feat_r: List[torch.Tensor], feat_n: List[torch.Tensor]) -> List[torch.Tensor]:
        if len(feat_r) != len(feat_n) or len(feat_r) != len(self.level_channels):
            raise InputError(
                f"level counts disagree: rgb={len(feat_r)}, normal={len(feat_n)}, "
                f"expected {len(self.level_channels)}"
            )
        fused = []
        for i, (fr, fn) in enumerate(zip(feat_r, feat_n)):
            if self.mode in ("hffm", "hffm+ffrm"):
                x = self.attn[i](fr, fn)
            else:
                x = torch.cat([fr, fn], dim=1)
                if self.mode == "seb":
                    x = self.seb[i](x)
            if self.mode in ("ffrm", "hffm+ffrm"):
                x = self.recal[i](x)
            fused.append(x)
        return fused
