"""Full model assembly: duplex encoder -> fusion -> pixel decoder -> queries."""

from typing import List, Optional

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig
from .config import Config
from .errors import ConfigurationError, InputError
from .fusion import FusionBlock
from .pixel_decoder import PixelDecoder, PixelDecoderOutput
from .query_decoder import PredictionSet, QueryDecoder


class SegmentationNet(nn.Module):
    """RGB-Normal (or RGB-only ablation) query-based segmentation network."""

    def __init__(self, cfg: Config, num_classes: int = 3):
        super().__init__()
        cfg.validate()
        self.num_classes = num_classes
        self.modality = cfg["model.modality"]
        bcfg = BackboneConfig(
            stem_channels=cfg["backbone.stem_channels"],
            channel_schedule=list(cfg["backbone.channels"]),
            blocks_per_stage=list(cfg["backbone.blocks"]),
        )
        self.encoder_rgb = Backbone(bcfg)
        if self.modality == "rgb+normal":
            self.encoder_normal = Backbone(bcfg)
            self.fusion = FusionBlock(bcfg.channel_schedule, mode=cfg["fusion.mode"])
            pd_in = self.fusion.out_channels
        else:
            self.encoder_normal = None
            self.fusion = None
            pd_in = list(bcfg.channel_schedule)
        self.pixel_decoder = PixelDecoder(
            pd_in,
            channels=cfg["pixel_decoder.C"],
            layers=cfg["pixel_decoder.layers"],
            heads=cfg["pixel_decoder.heads"],
            points=cfg["pixel_decoder.points"],
        )
        self.query_decoder = QueryDecoder(
            channels=cfg["decoder.dim"],
            num_classes=num_classes,
            num_queries=cfg["decoder.num_queries"],
            num_layers=cfg["decoder.layers"],
        )

    def encode(self, rgb: torch.Tensor, normal_img: Optional[torch.Tensor]) -> List[torch.Tensor]:
        feats_rgb = self.encoder_rgb(rgb)
        if self.modality == "rgb+normal":
            if normal_img is None:
                raise InputError("modality rgb+normal requires a normal image input")
            feats_normal = self.encoder_normal(normal_img)
            return self.fusion(feats_rgb, feats_normal)
        return feats_rgb

    def decode_pixels(self, fused: List[torch.Tensor]) -> PixelDecoderOutput:
        return self.pixel_decoder(fused)

    def forward(self, rgb: torch.Tensor, normal_img: Optional[torch.Tensor] = None) -> List[PredictionSet]:
        fused = self.encode(rgb, normal_img)
        pdec = self.pixel_decoder(fused)
        return self.query_decoder.decode(pdec)


def build_network(cfg: Config, num_classes: int = 3) -> SegmentationNet:
    """Construct the network with parameters seeded by cfg['seed']."""
    state = torch.random.get_rng_state()
    torch.manual_seed(cfg["seed"])
    try:
        net = SegmentationNet(cfg, num_classes=num_classes)
    finally:
        torch.random.set_rng_state(state)
    return net


def backbone_parameter_names(net: SegmentationNet) -> List[str]:
    """Names of every parameter belonging to the (duplex) encoder."""
    return [name for name, _ in net.named_parameters() if name.startswith("encoder_")]
