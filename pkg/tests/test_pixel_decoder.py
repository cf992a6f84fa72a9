import numpy as np
import pytest
import torch

from duplexseg.errors import ConfigurationError, InputError
from duplexseg.pixel_decoder import (
    DeformableAttention,
    PixelDecoder,
    bilinear_sample,
    deform_attn_sample,
    sine_position_encoding,
)

from gradcheck import check_gradients


def fused_pyramid(seed=0, b=1, h=64, w=96, channels=(32, 64, 128, 256), dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    strides = (4, 8, 16, 32)
    return [
        torch.randn(b, c, h // s, w // s, generator=gen, dtype=dtype) for c, s in zip(channels, strides)
    ]


class TestBilinearSample:
    def test_exact_pixel_center(self):
        vmap = torch.arange(24, dtype=torch.float64).reshape(1, 2, 3, 4)
        # center of pixel (1, 2): x = 2.5/4, y = 1.5/3
        pts = torch.tensor([[[2.5 / 4, 1.5 / 3]]], dtype=torch.float64)
        out = bilinear_sample(vmap, pts)
        assert torch.allclose(out[0, :, 0], vmap[0, :, 1, 2])

    def test_midpoint_average(self):
        vmap = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        vmap[0, 0, 0, 0] = 2.0
        vmap[0, 0, 0, 1] = 4.0
        # midpoint between pixels (0,0) and (0,1): x = 0.5, y = 0.25
        pts = torch.tensor([[[0.5, 0.25]]], dtype=torch.float64)
        out = bilinear_sample(vmap, pts)
        assert torch.allclose(out[0, 0, 0], torch.tensor(3.0, dtype=torch.float64))

    def test_outside_is_zero(self):
        vmap = torch.ones(1, 3, 4, 4, dtype=torch.float64)
        pts = torch.tensor([[[2.0, 2.0], [-1.0, 0.5]]], dtype=torch.float64)
        out = bilinear_sample(vmap, pts)
        assert torch.equal(out, torch.zeros_like(out))

    def test_gradients(self):
        gen = torch.Generator().manual_seed(0)
        vmap = torch.randn(1, 2, 4, 5, generator=gen, dtype=torch.float64, requires_grad=True)
        # generic non-integer locations keep clear of bilinear kinks
        pts = (torch.rand(1, 6, 2, generator=gen, dtype=torch.float64) * 0.8 + 0.07).requires_grad_(True)
        weights = torch.randn(1, 2, 6, generator=gen, dtype=torch.float64)

        def fn():
            return (weights * bilinear_sample(vmap, pts)).sum()

        check_gradients(fn, [vmap, pts], rtol=1e-3)


class TestDeformAttnSample:
    def test_zero_offset_at_center(self):
        vmap = torch.arange(12, dtype=torch.float64).reshape(3, 2, 2)
        ref = torch.tensor([0.25, 0.75], dtype=torch.float64)  # pixel (1, 0)
        offsets = torch.zeros(1, 2, dtype=torch.float64)
        out = deform_attn_sample(vmap, ref, offsets)
        assert torch.allclose(out[0], vmap[:, 1, 0])

    def test_fully_outside(self):
        vmap = torch.ones(2, 3, 3, dtype=torch.float64)
        ref = torch.tensor([0.5, 0.5], dtype=torch.float64)
        offsets = torch.tensor([[5.0, 5.0]], dtype=torch.float64)
        out = deform_attn_sample(vmap, ref, offsets)
        assert torch.equal(out[0], torch.zeros(2, dtype=torch.float64))


class TestPixelDecoder:
    def test_reduce_channels(self):
        dec = PixelDecoder([32, 64, 128, 256], channels=64)
        reduced = dec.reduce_channels(fused_pyramid())
        assert [r.shape[1] for r in reduced] == [64, 64, 64, 64]
        assert [tuple(r.shape[-2:]) for r in reduced] == [(16, 24), (8, 12), (4, 6), (2, 3)]

    def test_identity_reduce(self):
        dec = PixelDecoder([8, 64, 128, 256], channels=8)
        with torch.no_grad():
            dec.reduce[0].weight.copy_(torch.eye(8).reshape(8, 8, 1, 1))
            dec.reduce[0].bias.zero_()
        x = torch.randn(1, 8, 16, 24)
        out = dec.reduce_channels([x] + fused_pyramid()[1:])[0]
        assert torch.allclose(out, x, atol=1e-6)

    def test_output_shapes(self):
        dec = PixelDecoder([32, 64, 128, 256], channels=64)
        out = dec(fused_pyramid())
        assert [tuple(f.shape[-2:]) for f in out.refined] == [(8, 12), (4, 6), (2, 3)]
        assert [f.shape[1] for f in out.refined] == [64, 64, 64]
        assert tuple(out.embedding.shape[-2:]) == (16, 24)
        assert out.embedding.shape[1] == 64

    def test_attention_weights_sum_to_one(self):
        attn = DeformableAttention(64, heads=4, levels=3, points=4)
        with torch.no_grad():
            attn.weight_net.weight.normal_()
            attn.weight_net.bias.normal_()
        tokens = torch.randn(2, 7, 64)
        _, weights = attn.sampling_parameters(tokens)
        sums = weights.sum(dim=(-2, -1))
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_zero_layers_identity(self):
        torch.manual_seed(0)
        dec = PixelDecoder([32, 64, 128, 256], channels=64, layers=0)
        fused = fused_pyramid(seed=3)
        reduced = dec.reduce_channels(fused)
        out = dec(fused)
        for lvl, refined in enumerate(out.refined):
            h, w = refined.shape[-2:]
            pos = sine_position_encoding(h, w, 64)
            expect = reduced[lvl + 1] + pos[None] + dec.level_embed[lvl][None, :, None, None]
            assert torch.allclose(refined, expect, atol=1e-6)
        assert out.embedding.shape == reduced[0].shape

    def test_determinism(self):
        torch.manual_seed(5)
        dec = PixelDecoder([32, 64, 128, 256], channels=64)
        with torch.no_grad():
            for p in dec.parameters():
                p.normal_(generator=None)
        fused = fused_pyramid(seed=9)
        a = dec(fused)
        b = dec(fused)
        for x, y in zip(a.refined + [a.embedding], b.refined + [b.embedding]):
            assert torch.equal(x, y)

    def test_heads_divisibility(self):
        with pytest.raises(ConfigurationError):
            DeformableAttention(62, heads=4)

    def test_deformable_layer_gradients(self):
        torch.manual_seed(1)
        attn = DeformableAttention(8, heads=2, levels=2, points=2).double()
        with torch.no_grad():
            # deviate from the zero init so offsets and weights are exercised
            attn.offset_net.weight.normal_(std=0.05)
            attn.offset_net.bias.normal_(std=0.05)
            attn.weight_net.weight.normal_(std=0.2)
            attn.weight_net.bias.normal_(std=0.2)
        shapes = [(3, 4), (2, 2)]
        ref = PixelDecoder.reference_points(shapes, torch.float64, None)
        tokens = torch.randn(1, 16, 8, dtype=torch.float64, requires_grad=True)
        weights = torch.randn(1, 16, 8, dtype=torch.float64)

        def fn():
            return (weights * attn(tokens, shapes, ref)).sum()

        params = [tokens, attn.offset_net.weight, attn.weight_net.weight, attn.value_proj.weight]
        check_gradients(fn, params, rtol=1e-3)
