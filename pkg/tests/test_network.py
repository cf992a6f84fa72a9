import pytest
import torch

from duplexseg.config import Config
from duplexseg.errors import ConfigurationError, InputError
from duplexseg.network import backbone_parameter_names, build_network


def small_cfg(**over):
    cfg = Config()
    cfg.set("backbone.channels", [8, 8, 16, 16])
    cfg.set("backbone.stem_channels", 8)
    cfg.set("pixel_decoder.C", 16)
    cfg.set("decoder.dim", 16)
    cfg.set("decoder.num_queries", 6)
    cfg.set("decoder.layers", 3)
    cfg.set("pixel_decoder.layers", 1)
    for k, v in over.items():
        cfg.set(k, v)
    return cfg


def test_end_to_end_shape_contract():
    cfg = Config()  # desk-scale defaults
    net = build_network(cfg)
    rgb = torch.randn(1, 3, 64, 96)
    nrm = torch.randn(1, 3, 64, 96)

    feats = net.encoder_rgb(rgb)
    assert [tuple(f.shape[-2:]) for f in feats] == [(16, 24), (8, 12), (4, 6), (2, 3)]
    assert [f.shape[1] for f in feats] == [16, 32, 64, 128]

    fused = net.encode(rgb, nrm)
    assert [f.shape[1] for f in fused] == [32, 64, 128, 256]

    pdec = net.pixel_decoder(fused)
    assert [tuple(f.shape[-2:]) for f in pdec.refined] == [(8, 12), (4, 6), (2, 3)]
    assert all(f.shape[1] == 64 for f in pdec.refined)
    assert tuple(pdec.embedding.shape[1:]) == (64, 16, 24)

    preds = net.query_decoder.decode(pdec)
    assert tuple(preds[-1].mask_logits.shape) == (1, 20, 16, 24)
    assert tuple(preds[-1].class_logits.shape) == (1, 20, 4)


def test_build_deterministic():
    a = build_network(small_cfg())
    b = build_network(small_cfg())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_duplex_encoders_independent():
    net = build_network(small_cfg())
    x = torch.randn(1, 3, 32, 64)
    before = [f.detach().clone() for f in net.encoder_normal(x)]
    with torch.no_grad():
        for p in net.encoder_rgb.parameters():
            p.add_(0.5)
    after = net.encoder_normal(x)
    for b, a in zip(before, after):
        assert torch.equal(b, a)


def test_rgb_only_modality():
    net = build_network(small_cfg(**{"model.modality": "rgb"}))
    assert net.encoder_normal is None
    preds = net(torch.randn(1, 3, 32, 64))
    assert tuple(preds[-1].class_logits.shape) == (1, 6, 4)
    with pytest.raises(InputError):
        duplex = build_network(small_cfg())
        duplex(torch.randn(1, 3, 32, 64), None)


def test_backbone_parameter_names_cover_both_encoders():
    net = build_network(small_cfg())
    names = set(backbone_parameter_names(net))
    assert any(n.startswith("encoder_rgb.") for n in names)
    assert any(n.startswith("encoder_normal.") for n in names)
    rest = [n for n, _ in net.named_parameters() if n not in names]
    assert all(not n.startswith("encoder_") for n in rest)
    assert len(names) + len(rest) == len(list(net.named_parameters()))


def test_dim_mismatch_rejected():
    cfg = small_cfg()
    cfg.set("decoder.dim", 32)
    with pytest.raises(ConfigurationError):
        build_network(cfg)
