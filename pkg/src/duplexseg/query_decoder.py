"""Query-based mask prediction over the refined multi-scale maps.

N learned query vectors are refined by a stack of decoder layers; each layer
runs masked cross-attention against one refined scale (visited coarse to fine,
cycling), query self-attention, and a feed-forward network. After every layer
the queries are decoded into class logits over K+1 classes (the extra column
is "no object") and mask logits via a dot product between a query mask
embedding and the per-pixel embedding.

The cross-attention is literal: out = Softmax(M + Q K^T) V + X with the
additive mask M containing only 0 and -inf entries, no scaling factor and no
normalization inside. Normalization lives on the self-attention and FFN branch
inputs so that zeroing the value/output projections makes every layer an exact
identity on the queries.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError
from .pixel_decoder import PixelDecoderOutput

NEG_INF = float("-inf")


@dataclass
class AttentionMask:
    values: torch.Tensor  # (B, N, P), entries exactly 0 or -inf
    source_stride: int


@dataclass
class PredictionSet:
    class_logits: torch.Tensor  # (B, N, K+1), last column = no-object
    mask_logits: torch.Tensor  # (B, N, H/4, W/4)

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[-1] - 1


class MaskedCrossAttention(nn.Module):
    """out = Softmax(M + f_Q(x) f_K(feat)^T) f_V(feat) + x.

    A query row whose mask is entirely -inf gets an exactly zero attention
    update instead of NaNs.
    """

    def __init__(self, channels):
        super().__init__()
        self.f_q = nn.Linear(channels, channels)
        self.f_k = nn.Linear(channels, channels)
        self.f_v = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, feat: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
        q = self.f_q(x)  # (B, N, C)
        k = self.f_k(feat)  # (B, P, C)
        v = self.f_v(feat)
        logits = q @ k.transpose(1, 2)  # (B, N, P)
        if mask is not None:
            if mask.shape != logits.shape:
                raise InputError(f"mask shape {tuple(mask.shape)} != logits shape {tuple(logits.shape)}")
            dead = torch.isneginf(mask).all(dim=-1)  # (B, N)
            logits = logits + mask
            logits = torch.where(dead[..., None], torch.zeros_like(logits), logits)
            attn = torch.softmax(logits, dim=-1)
            attn = attn * (~dead[..., None]).to(attn.dtype)
        else:
            attn = torch.softmax(logits, dim=-1)
        return attn @ v + x


class DecoderLayer(nn.Module):
    """Masked cross-attention, then pre-norm self-attention and FFN."""

    def __init__(self, channels, ffn_mult=4):
        super().__init__()
        self.cross = MaskedCrossAttention(channels)
        self.norm_self = nn.LayerNorm(channels)
        self.sa_q = nn.Linear(channels, channels)
        self.sa_k = nn.Linear(channels, channels)
        self.sa_v = nn.Linear(channels, channels)
        self.sa_out = nn.Linear(channels, channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_mult * channels),
            nn.ReLU(inplace=True),
            nn.Linear(ffn_mult * channels, channels),
        )

    def forward(self, x, feat, mask):
        x = self.cross(x, feat, mask)
        h = self.norm_self(x)
        q, k, v = self.sa_q(h), self.sa_k(h), self.sa_v(h)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        x = x + self.sa_out(attn @ v)
        x = x + self.ffn(self.norm_ffn(x))
        return x


class PredictHeads(nn.Module):
    """Class logits from a linear map; mask logits from <MLP(x), E> per pixel."""

    def __init__(self, channels, num_classes):
        super().__init__()
        self.num_classes = num_classes
        self.class_proj = nn.Linear(channels, num_classes + 1)
        self.mask_mlp = nn.Sequential(
            nn.Linear(channels, channels),
            nn.ReLU(inplace=True),
            nn.Linear(channels, channels),
            nn.ReLU(inplace=True),
            nn.Linear(channels, channels),
        )

    def forward(self, x: torch.Tensor, embedding: torch.Tensor) -> PredictionSet:
        if embedding.shape[1] != self.mask_mlp[-1].out_features:
            raise InputError(
                f"embedding has {embedding.shape[1]} channels, mask embedding emits "
                f"{self.mask_mlp[-1].out_features}"
            )
        class_logits = self.class_proj(x)
        mask_embed = self.mask_mlp(x)  # (B, N, C)
        mask_logits = torch.einsum("bqc,bchw->bqhw", mask_embed, embedding)
        return PredictionSet(class_logits=class_logits, mask_logits=mask_logits)


def make_attention_mask(pred: PredictionSet, target_size: Tuple[int, int], source_stride: int) -> AttentionMask:
    """Threshold the resized mask probabilities into an additive 0/-inf mask.

    Positions with probability >= 0.5 stay visible (0); rows that would be
    fully masked are reset to fully visible. The mask is detached: gradients
    never flow through it.
    """
    probs = torch.sigmoid(pred.mask_logits.detach())
    probs = F.interpolate(probs, size=target_size, mode="bilinear", align_corners=False)
    visible = probs.flatten(2) >= 0.5  # (B, N, P)
    dead = ~visible.any(dim=-1)
    visible = visible | dead[..., None]
    values = torch.where(visible, 0.0, NEG_INF).to(pred.mask_logits.dtype)
    return AttentionMask(values=values, source_stride=source_stride)


class QueryDecoder(nn.Module):
    """Refine learned queries over the refined scales and emit predictions."""

    def __init__(self, channels=64, num_classes=3, num_queries=20, num_layers=6, num_levels=3):
        super().__init__()
        if num_layers % num_levels:
            raise ConfigurationError(
                f"decoder layer count {num_layers} must be divisible by the {num_levels} scales"
            )
        self.num_queries = num_queries
        self.num_levels = num_levels
        self.query_feat = nn.Parameter(torch.empty(num_queries, channels))
        nn.init.normal_(self.query_feat)
        self.layers = nn.ModuleList(DecoderLayer(channels) for _ in range(num_layers))
        self.heads = PredictHeads(channels, num_classes)

    def level_schedule(self) -> List[int]:
        """Refined-map index visited by each layer: coarse -> fine, cycling."""
        order = list(range(self.num_levels - 1, -1, -1))
        return [order[i % self.num_levels] for i in range(len(self.layers))]

    def visit_strides(self, strides: List[int]) -> List[int]:
        return [strides[lvl] for lvl in self.level_schedule()]

    def decode(self, pdec: PixelDecoderOutput) -> List[PredictionSet]:
        """One PredictionSet per layer plus the initial one from the raw queries."""
        b = pdec.embedding.shape[0]
        x = self.query_feat[None].expand(b, -1, -1)
        preds = [self.heads(x, pdec.embedding)]
        for layer, lvl in zip(self.layers, self.level_schedule()):
            feat_map = pdec.refined[lvl]
            stride = pdec.strides[lvl]
            mask = make_attention_mask(preds[-1], tuple(feat_map.shape[-2:]), stride)
            feat = feat_map.flatten(2).transpose(1, 2)  # (B, P, C)
            x = layer(x, feat, mask.values)
            preds.append(self.heads(x, pdec.embedding))
        return preds

    forward = decode


def semantic_inference(
    pred: PredictionSet, output_size: Optional[Tuple[int, int]] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Reduce a prediction to a label map and per-class probability maps.

    Per-pixel class score: sum over queries of class probability (no-object
    column dropped) times mask probability. Labels are the per-pixel argmax
    over the K real classes with ties broken toward the lower class index;
    probability maps are the scores normalized per pixel. When output_size is
    given, scores are bilinearly upsampled before the argmax.
    """
    class_prob = torch.softmax(pred.class_logits, dim=-1)[..., :-1]  # (B, N, K)
    mask_prob = torch.sigmoid(pred.mask_logits)  # (B, N, h, w)
    scores = torch.einsum("bqk,bqhw->bkhw", class_prob, mask_prob)
    if output_size is not None:
        scores = F.interpolate(scores, size=output_size, mode="bilinear", align_corners=False)
    labels = scores.argmax(dim=1)
    probs = scores / scores.sum(dim=1, keepdim=True).clamp_min(1e-12)
    return labels, probs
