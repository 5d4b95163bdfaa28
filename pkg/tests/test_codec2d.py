import numpy as np
import pytest
import torch

from vlscc import ratequant
from vlscc.channel import ChannelConfig, awgn, sidelink_bpp
from vlscc.codec2d import Codec2DConfig, VLSCC2D, center_crop16


def small(**kw):
    base = dict(n_symbols=6, levels=8, feat_channels=5, ran_channels=4, seed=2)
    base.update(kw)
    return VLSCC2D(Codec2DConfig(**base))


def test_config_validation():
    with pytest.raises(ValueError):
        Codec2DConfig(levels=1)
    with pytest.raises(ValueError):
        Codec2DConfig(rate_allocation=False)
    with pytest.raises(ValueError):
        Codec2DConfig(feat_channels=0)


def test_center_crop16():
    img = np.zeros((70, 50, 3))
    assert center_crop16(img).shape == (64, 48, 3)
    with pytest.raises(ValueError):
        center_crop16(np.zeros((10, 40, 3)))


@pytest.mark.parametrize("hw", [(32, 32), (48, 64), (16, 16)])
def test_shapes(hw):
    h, w = hw
    m = small()
    x = torch.rand(2, 3, h, w)
    out = m(x)
    assert out.image_hat.shape == x.shape
    assert ((out.image_hat >= 0) & (out.image_hat <= 1)).all()
    assert out.features.shape == (2, 5, h // 4, w // 4)
    assert out.rate_map.shape == (2, h // 16, w // 16)
    assert out.mask.shape == (2, 6, h // 16, w // 16)


def test_bad_input_rejected():
    m = small()
    with pytest.raises(ValueError):
        m(torch.rand(1, 3, 24, 32))
    with pytest.raises(ValueError):
        m(torch.rand(1, 1, 32, 32))


def test_mask_matches_quant_map():
    m = small()
    out = m(torch.rand(3, 3, 32, 32))
    q = out.quant.detach().numpy().astype(np.int64)
    ref = ratequant.make_mask_tensor(q[1], 6, 8)
    assert np.array_equal(out.mask[1].permute(1, 2, 0).detach().numpy(), ref)


def test_physical_shortening_matches_static_path():
    m = small().double()
    x = torch.rand(3, 3, 32, 48, dtype=torch.float64)
    frames = m.encode(x)
    static = m(x)
    for b, f in enumerate(frames):
        assert f.shape == (2, 3, 6)
        assert f.n_kept == int(static.mask[b].sum())
        assert f.n_kept == int(ratequant.mask_popcount(f.quant, 6, 8).sum())
    assert torch.allclose(m.decode(frames), static.image_hat, atol=1e-12)


def test_fixed_length_codec():
    m = small(rate_allocation=False, fixed_symbols=4)
    assert m.ran is None
    out = m(torch.rand(2, 3, 32, 32))
    assert out.rate_map is None
    assert out.mask.sum().item() / out.mask.numel() == 4 / 6
    frames = m.encode(torch.rand(2, 3, 32, 32))
    assert all(f.quant is None and f.n_kept == 4 * 4 for f in frames)
    noisy = m.transmit(frames, ChannelConfig(10, 0))
    assert m.decode(noisy).shape == (2, 3, 32, 32)


def test_quant_override():
    m = small()
    q = torch.tensor([[[0, 7], [3, 1]]])
    out = m(torch.rand(1, 3, 32, 32), quant=q)
    assert out.rate_map is None
    assert out.mask[0].sum(0).tolist() == ratequant.mask_popcount(q[0].numpy(), 6, 8).tolist()
    with pytest.raises(ValueError):
        m(torch.rand(1, 3, 32, 32), quant=torch.zeros(1, 3, 2, dtype=torch.long))


def test_ran_receives_gradient():
    m = small()
    out = m(torch.rand(4, 3, 32, 32), channel=lambda z: awgn(z, ChannelConfig(10, 0)))
    ((out.image_hat - 0.5) ** 2).mean().backward()
    assert sum(p.grad.abs().sum().item() for p in m.ran.parameters()) > 0


def test_ran_gradient_leak_keeps_saturated_rate_trainable():
    leaky, plain = small(), small(ran_grad_leak=0.0)
    for m in (leaky, plain):
        with torch.no_grad():
            m.ran[-1].bias.fill_(-60.0)  # sigmoid saturates to 0
    feats = torch.rand(2, 5, 8, 8)
    r_leaky, r_plain = leaky.rate_map(feats), plain.rate_map(feats)
    assert torch.equal(r_leaky, r_plain)
    r_leaky.sum().backward()
    r_plain.sum().backward()
    assert leaky.ran[-1].bias.grad.item() == pytest.approx(0.01 * 8)
    assert abs(plain.ran[-1].bias.grad.item()) < 1e-20


@pytest.mark.parametrize("detach", [True, False])
def test_rate_conditioning_gradient(detach):
    m = small(detach_rate_inputs=detach)
    feats = torch.rand(2, 5, 8, 8)
    rmap, q, q_norm, mask, sce_rate = m._rate_path(feats, None)
    assert torch.equal(sce_rate, rmap) and torch.equal(q_norm, q / 7)
    assert sce_rate.requires_grad != detach and q_norm.requires_grad != detach
    assert mask.requires_grad


def test_default_sidelink_rate():
    cfg = Codec2DConfig()
    assert sidelink_bpp(256, 256, cfg.levels) == 0.0234375
