import numpy as np
import pytest
import torch
import torch.nn as nn

from crrn.exceptions import ConfigurationError, DimensionError
from crrn.gin import GinConfig, build_gin
from crrn.iin import FeatureExtractionBlock, IinConfig, ImageNet, ParallelUpsample, build_iin
from crrn.network import ConcurrentNet, gin_input


def count_params(module):
    return sum(p.numel() for p in module.parameters())


class TestGin:
    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            GinConfig(levels=4)
        with pytest.raises(ConfigurationError):
            GinConfig(base_channels=2)
        with pytest.raises(ConfigurationError):
            GinConfig(input_channels=3)

    def test_widths_double_with_cap(self):
        assert GinConfig(base_channels=16).widths() == [16, 32, 64, 128, 128]

    def test_parameter_count_base16(self):
        # 3x3 convs and 4x4 transposed convs with biases, counted layer by layer
        widths, total, in_ch = [16, 32, 64, 128, 128], 0, 4
        for w in widths:
            total += (9 * in_ch * w + w) + (9 * w * w + w)
            in_ch = w
        for w in reversed(widths):
            total += (16 * in_ch * w + w) + (9 * 2 * w * w + w)
            in_ch = w
        total += 9 * 16 + 1
        assert total == 1972625
        assert count_params(build_gin(GinConfig(base_channels=16))) == total

    def test_bottleneck_and_pyramid_shapes(self):
        net = build_gin(GinConfig(base_channels=4))
        x = torch.rand(1, 4, 96, 160)
        skips, bottleneck = net.encode(x)
        assert bottleneck.shape[-2:] == (3, 5)
        assert [s.shape[-2:] for s in skips] == [(96, 160), (48, 80), (24, 40), (12, 20), (6, 10)]
        out = net(x)
        assert out.gradient.shape == (1, 1, 96, 160)
        assert [tuple(p.shape[-2:]) for p in out.pyramid] == [(6, 10), (12, 20), (24, 40), (48, 80), (96, 160)]
        assert (out.gradient >= 0).all()

    def test_mirror_links_use_every_encoder_level_once(self):
        cfg = GinConfig(base_channels=8)
        net = build_gin(cfg)
        widths = cfg.widths()
        # decoder level k is fed by encoder level 4 - k: concat width = decoder + encoder channels
        for k, level in enumerate(net.decoder):
            enc = widths[4 - k]
            assert level.link_channels == level.up.out_channels + enc
            assert level.fuse.in_channels == level.link_channels

    def test_rejects_indivisible(self):
        with pytest.raises(DimensionError):
            build_gin(GinConfig(base_channels=4))(torch.rand(1, 4, 100, 96))

    def test_untrained_returns_input_gradient(self):
        x = torch.rand(1, 3, 32, 64)
        out = build_gin(GinConfig(base_channels=4))(gin_input(x))
        torch.testing.assert_close(out.gradient, gin_input(x)[:, 3:], rtol=0, atol=0)

    def test_deterministic_inference(self):
        net = build_gin(GinConfig(base_channels=4)).eval()
        x = torch.rand(2, 4, 64, 64)
        with torch.no_grad():
            assert torch.equal(net(x).gradient, net(x).gradient)

    def test_differentiable(self):
        net = build_gin(GinConfig(base_channels=4))
        x = torch.rand(1, 4, 32, 32, requires_grad=True)
        net(x).pyramid[-1].sum().backward()
        assert x.grad is not None and all(p.grad is not None for p in net.encoder.parameters())


class TestFeatureExtraction:
    @pytest.mark.parametrize("variant", ["A", "B"])
    def test_preserves_spatial_size(self, variant):
        block = FeatureExtractionBlock(32, variant, scale=0.25)
        out = block(torch.rand(2, 32, 7, 9))
        assert out.shape == (2, block.out_channels, 7, 9)

    def test_width_is_sum_of_branches(self):
        widths = {"conv": 5, "stack": (3, 4, 6), "pool": 7}
        block = FeatureExtractionBlock(8, "A", widths=widths)
        assert block.branch_widths == [5, 6, 7]
        assert block(torch.rand(1, 8, 6, 6)).shape[1] == 18

    def test_variant_b_has_four_branches(self):
        block = FeatureExtractionBlock(16, "B", scale=0.5)
        assert len(block.branches) == 4
        assert block.out_channels == sum(block.branch_widths) == 192 + 144 + 160 + 128

    def test_zeroed_final_convs_give_zero_output(self):
        block = FeatureExtractionBlock(8, "A", scale=0.125)
        with torch.no_grad():
            for conv in block.final_convs():
                conv.weight.zero_()
                conv.bias.zero_()
        out = block(torch.rand(1, 8, 5, 5))
        assert not out.any()
        # zeroing one branch only blanks exactly that branch's channel slice
        block = FeatureExtractionBlock(8, "B", scale=0.125)
        with torch.no_grad():
            last = block.final_convs()[1]
            last.weight.zero_()
            last.bias.zero_()
        out = block(torch.rand(1, 8, 5, 5))
        w = block.branch_widths
        lo = w[0]
        assert not out[:, lo:lo + w[1]].any()
        assert out[:, :lo].any() or out[:, lo + w[1]:].any()

    def test_all_convs_stride_one(self):
        block = FeatureExtractionBlock(8, "B", scale=0.25)
        kernels = set()
        for m in block.modules():
            if isinstance(m, nn.Conv2d):
                assert m.stride == (1, 1)
                kernels.add(m.kernel_size)
        assert (7, 7) in kernels and (1, 1) in kernels

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            FeatureExtractionBlock(8, "A", scale=0.25)(torch.rand(1, 9, 4, 4))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            FeatureExtractionBlock(8, "C")


class TestIin:
    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            IinConfig(backbone_depth=4)
        with pytest.raises(ConfigurationError):
            IinConfig(use_pretrained_backbone=True)

    def test_parallel_upsample_doubles(self):
        up = ParallelUpsample(6, 4)
        assert up(torch.rand(1, 6, 3, 5)).shape == (1, 4, 6, 10)
        assert [p.kernel_size for p in up.paths] == [(1, 1), (3, 3), (5, 5)]

    def test_backbone_reaches_one_32nd(self):
        net = build_iin(IinConfig(base_channels=4))
        assert net.features(torch.rand(1, 3, 64, 96)).shape[-2:] == (2, 3)

    def test_zero_residual_head_is_identity(self):
        net = build_iin(IinConfig(base_channels=4))
        x = torch.rand(1, 3, 32, 64)
        out = net(x)
        assert torch.equal(out.background, x)
        assert not out.residual.any()

    def test_residual_identity_holds_bitwise(self):
        net = build_iin(IinConfig(base_channels=4))
        with torch.no_grad():
            net.residual_head.weight.normal_(0, 0.3)
            net.residual_head.bias.normal_(0, 0.3)
        x = torch.rand(2, 3, 32, 32)
        out = net(x)
        assert torch.equal(out.background, torch.clamp(x - out.residual, 0, 1))
        inside = (out.background > 0) & (out.background < 1)
        torch.testing.assert_close((out.background + out.residual)[inside], x[inside])

    def test_guidance_shape_mismatch(self):
        gnet = build_gin(GinConfig(base_channels=4))
        inet = ImageNet(IinConfig(base_channels=4), guidance_channels=gnet.pyramid_channels)
        pyramid = gnet(gin_input(torch.rand(1, 3, 64, 64))).pyramid
        with pytest.raises(DimensionError):
            inet(torch.rand(1, 3, 32, 64), pyramid)
        with pytest.raises(DimensionError):
            inet(torch.rand(1, 3, 64, 64), pyramid[:4])

    def test_zeroed_guidance_is_valid(self):
        net = ConcurrentNet(base_channels=4)
        x = torch.rand(1, 3, 32, 32)
        full, ablated = net(x), net(x, guidance=False)
        for a, b in ((full.background, ablated.background), (full.reflection, ablated.reflection)):
            assert a.shape == b.shape
            assert torch.isfinite(b).all()


@pytest.mark.parametrize("size", [(96, 160), (224, 288)])
def test_training_resolutions_base16(size):
    net = ConcurrentNet(base_channels=16).eval()
    with torch.no_grad():
        with torch.no_grad():
            net.iin.residual_head.weight.normal_(0, 0.05)
        x = torch.rand(1, 3, *size)
        g = net.forward_gradient(x)
        _, bottleneck = net.gin.encode(gin_input(x))
        p = net(x)
        p2 = net(x)
    assert bottleneck.shape[-2:] == (size[0] // 32, size[1] // 32)
    assert g.gradient.shape == (1, 1, *size)
    for t in (p.background, p.reflection, p.residual):
        assert t.shape == (1, 3, *size)
    assert torch.equal(p.background, torch.clamp(x - p.residual, 0, 1))
    assert torch.equal(p.background, p2.background)
    assert ((p.reflection >= 0) & (p.reflection <= 1)).all()


def test_joint_forward_is_differentiable():
    net = ConcurrentNet(base_channels=4)
    x = torch.rand(1, 3, 32, 32)
    p = net(x)
    (p.reflection.mean() + p.gradient.mean() + p.residual.mean()).backward()
    assert all(q.grad is not None for q in net.parameters())
    assert np.isfinite(sum(float(q.grad.abs().sum()) for q in net.parameters()))
