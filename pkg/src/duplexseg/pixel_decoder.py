"""Channel reduction, multi-scale deformable attention, per-pixel embedding.

The three coarsest pyramid levels (strides 8/16/32) are flattened into one
token sequence, position- and level-encoded, and refined by a stack of
deformable-attention layers in which every token samples a small set of
learned offset locations from all three levels. The stride-4 level is reserved
for the high-resolution per-pixel embedding: a pointwise convolution of the
stride-4 map plus the upsampled finest refined map.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError


def sine_position_encoding(h: int, w: int, channels: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed 2-D sinusoidal embedding, (channels, h, w); channels % 4 == 0."""
    if channels % 4:
        raise ConfigurationError(f"position encoding needs channels divisible by 4, got {channels}")
    half = channels // 2
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w * 2 * math.pi
    dim_t = torch.arange(half // 2, dtype=dtype, device=device)
    dim_t = 10000.0 ** (2 * dim_t / half)
    py = ys[:, None] / dim_t[None, :]  # (h, half/2)
    px = xs[:, None] / dim_t[None, :]  # (w, half/2)
    py = torch.cat([py.sin(), py.cos()], dim=-1)  # (h, half)
    px = torch.cat([px.sin(), px.cos()], dim=-1)  # (w, half)
    out = torch.cat(
        [py[:, None, :].expand(h, w, half), px[None, :, :].expand(h, w, half)], dim=-1
    )
    return out.permute(2, 0, 1)


def bilinear_sample(value_map: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) maps at normalized (x, y) points with zero padding.

    points: (B, Q, 2) in [0, 1] image coordinates; the center of pixel (i, j)
    is at ((j + 0.5) / W, (i + 0.5) / H). Returns (B, C, Q). Differentiable in
    both the values and the points.
    """
    b, c, h, w = value_map.shape
    gx = points[..., 0] * w - 0.5
    gy = points[..., 1] * h - 0.5
    x0 = torch.floor(gx)
    y0 = torch.floor(gy)
    wx = gx - x0
    wy = gy - y0

    out = value_map.new_zeros(b, c, points.shape[1])
    flat = value_map.reshape(b, c, h * w)
    for dx, dy, wgt in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        cx = x0 + dx
        cy = y0 + dy
        inside = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        idx = (cy.clamp(0, h - 1) * w + cx.clamp(0, w - 1)).long()  # (B, Q)
        vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(b, c, -1))
        out = out + vals * (wgt * inside.to(value_map.dtype)).unsqueeze(1)
    return out


def deform_attn_sample(value_map: torch.Tensor, ref_point: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Sample one value map at ref_point + offset for every offset.

    value_map: (C, H, W); ref_point: (2,) normalized; offsets: (P, 2) in the
    same normalized units. Returns (P, C).
    """
    pts = (ref_point[None, :] + offsets)[None]  # (1, P, 2)
    return bilinear_sample(value_map[None], pts)[0].transpose(0, 1)


class DeformableAttention(nn.Module):
    """Each token attends to `points` sampled locations per head per level."""

    def __init__(self, channels, heads=4, levels=3, points=4):
        super().__init__()
        if channels % heads:
            raise ConfigurationError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.levels = levels
        self.points = points
        self.value_proj = nn.Linear(channels, channels)
        self.offset_net = nn.Linear(channels, heads * levels * points * 2)
        self.weight_net = nn.Linear(channels, heads * levels * points)
        self.out_proj = nn.Linear(channels, channels)
        # start from the identity-like regime: zero offsets, uniform weights
        nn.init.zeros_(self.offset_net.weight)
        nn.init.zeros_(self.offset_net.bias)
        nn.init.zeros_(self.weight_net.weight)
        nn.init.zeros_(self.weight_net.bias)

    def sampling_parameters(self, tokens: torch.Tensor):
        """Per-token sampling offsets and softmax-normalized attention weights."""
        b, t, _ = tokens.shape
        hd = self.heads
        offsets = self.offset_net(tokens).view(b, t, hd, self.levels, self.points, 2)
        weights = torch.softmax(
            self.weight_net(tokens).view(b, t, hd, self.levels * self.points), dim=-1
        ).view(b, t, hd, self.levels, self.points)
        return offsets, weights

    def forward(
        self,
        tokens: torch.Tensor,  # (B, T, C)
        level_shapes: Sequence[Tuple[int, int]],
        ref_points: torch.Tensor,  # (T, 2) normalized, shared across batch
    ) -> torch.Tensor:
        b, t, c = tokens.shape
        hd = self.heads
        ch = c // hd
        offsets, weights = self.sampling_parameters(tokens)

        values = self.value_proj(tokens)  # (B, T, C)
        start = 0
        gathered = tokens.new_zeros(b, t, hd, ch)
        for lvl, (lh, lw) in enumerate(level_shapes):
            n = lh * lw
            vmap = (
                values[:, start : start + n]
                .view(b, lh, lw, hd, ch)
                .permute(0, 3, 4, 1, 2)
                .reshape(b * hd, ch, lh, lw)
            )
            locs = ref_points[None, :, None, None, :] + offsets[:, :, :, lvl]  # (B, T, hd, P, 2)
            locs = locs.permute(0, 2, 1, 3, 4).reshape(b * hd, t * self.points, 2)
            sampled = bilinear_sample(vmap, locs)  # (B*hd, ch, T*P)
            sampled = sampled.view(b, hd, ch, t, self.points)
            wl = weights[:, :, :, lvl].permute(0, 2, 1, 3)  # (B, hd, T, P)
            gathered = gathered + (sampled * wl[:, :, None]).sum(-1).permute(0, 3, 1, 2)
            start += n
        return self.out_proj(gathered.reshape(b, t, c))


class DeformableLayer(nn.Module):
    """Pre-norm deformable attention + feed-forward, both residual."""

    def __init__(self, channels, heads, levels, points, ffn_mult=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn = DeformableAttention(channels, heads, levels, points)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_mult * channels),
            nn.ReLU(inplace=True),
            nn.Linear(ffn_mult * channels, channels),
        )

    def forward(self, tokens, level_shapes, ref_points):
        tokens = tokens + self.attn(self.norm1(tokens), level_shapes, ref_points)
        tokens = tokens + self.ffn(self.norm2(tokens))
        return tokens


@dataclass
class PixelDecoderOutput:
    refined: List[torch.Tensor]  # fine-to-coarse: strides 8, 16, 32, C channels each
    embedding: torch.Tensor  # (B, C, H/4, W/4)

    @property
    def strides(self) -> List[int]:
        return [8, 16, 32]


class PixelDecoder(nn.Module):
    """Reduce fused channels to C, refine strides 8/16/32, emit embedding E."""

    def __init__(self, in_channels: List[int], channels=64, layers=3, heads=4, points=4):
        super().__init__()
        if len(in_channels) != 4:
            raise ConfigurationError(f"expected a 4-level pyramid, got {len(in_channels)} levels")
        self.channels = channels
        self.num_attn_levels = 3
        self.reduce = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.level_embed = nn.Parameter(torch.zeros(self.num_attn_levels, channels))
        nn.init.normal_(self.level_embed)
        self.layers = nn.ModuleList(
            DeformableLayer(channels, heads, self.num_attn_levels, points) for _ in range(layers)
        )
        self.embed_conv = nn.Conv2d(channels, channels, 1)

    def reduce_channels(self, fused: List[torch.Tensor]) -> List[torch.Tensor]:
        if len(fused) != len(self.reduce):
            raise InputError(f"expected {len(self.reduce)} levels, got {len(fused)}")
        return [conv(f) for conv, f in zip(self.reduce, fused)]

    @staticmethod
    def reference_points(level_shapes, dtype, device) -> torch.Tensor:
        pts = []
        for lh, lw in level_shapes:
            ys = (torch.arange(lh, dtype=dtype, device=device) + 0.5) / lh
            xs = (torch.arange(lw, dtype=dtype, device=device) + 0.5) / lw
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            pts.append(torch.stack([gx, gy], dim=-1).reshape(-1, 2))
        return torch.cat(pts, dim=0)

    def forward(self, fused: List[torch.Tensor]) -> PixelDecoderOutput:
        reduced = self.reduce_channels(fused)
        attn_maps = reduced[1:]  # strides 8, 16, 32
        level_shapes = [tuple(m.shape[-2:]) for m in attn_maps]
        b = reduced[0].shape[0]
        dtype, device = reduced[0].dtype, reduced[0].device

        tokens = []
        for lvl, m in enumerate(attn_maps):
            pos = sine_position_encoding(*level_shapes[lvl], self.channels, dtype=dtype, device=device)
            tok = (m + pos[None]).flatten(2).transpose(1, 2)  # (B, n, C)
            tokens.append(tok + self.level_embed[lvl][None, None, :])
        tokens = torch.cat(tokens, dim=1)
        ref_points = self.reference_points(level_shapes, dtype, device)

        for layer in self.layers:
            tokens = layer(tokens, level_shapes, ref_points)

        refined = []
        start = 0
        for lh, lw in level_shapes:
            n = lh * lw
            refined.append(tokens[:, start : start + n].transpose(1, 2).reshape(b, self.channels, lh, lw))
            start += n

        up = F.interpolate(refined[0], size=reduced[0].shape[-2:], mode="bilinear", align_corners=False)
        embedding = self.embed_conv(reduced[0] + up)
        return PixelDecoderOutput(refined=refined, embedding=embedding)
