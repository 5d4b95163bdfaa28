import numpy as np
import pytest
import torch

from vlscc import ratequant
from vlscc.channel import ChannelConfig, awgn
from vlscc.codec1d import Codec1DConfig, VLSCC1D, mlp


def small(**kw):
    base = dict(dim=12, n_symbols=16, levels=8, hidden=24, sce_layers=2, scd_layers=2, ran_layers=2, seed=3)
    base.update(kw)
    return VLSCC1D(Codec1DConfig(**base))


def test_config_validation():
    with pytest.raises(ValueError):
        Codec1DConfig(levels=1)
    with pytest.raises(ValueError):
        Codec1DConfig(rate_allocation=False)
    with pytest.raises(ValueError):
        Codec1DConfig(n_symbols=8, rate_allocation=False, fixed_symbols=9)
    with pytest.raises(ValueError):
        Codec1DConfig(sce_layers=0)
    assert Codec1DConfig(n_symbols=8, rate_allocation=False, fixed_symbols=8).fixed_symbols == 8


def test_mlp_structure():
    net = mlp(4, 2, 8, 3)
    assert [type(m).__name__ for m in net] == ["Linear", "PReLU", "Linear", "PReLU", "Linear"]
    assert net(torch.zeros(5, 4)).shape == (5, 2)


def test_seeded_init_is_deterministic_and_isolated():
    torch.manual_seed(0)
    a = torch.rand(2)
    m1 = small()
    torch.manual_seed(0)
    m2 = small()
    assert torch.equal(torch.rand(2), a)
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)
    m3 = small(seed=4)
    assert not torch.equal(m1.sce[0].weight, m3.sce[0].weight)


def test_forward_shapes_and_mask_consistency():
    m = small()
    x = torch.randn(7, 12)
    out = m(x)
    assert out.x_hat.shape == (7, 12)
    assert out.rate.shape == (7,) and ((out.rate > 0) & (out.rate < 1)).all()
    q = ratequant.quantize(out.rate.detach().numpy().astype(np.float64), 8)
    assert np.array_equal(out.quant.detach().numpy(), q)
    assert np.array_equal(out.mask.detach().numpy(), ratequant.make_mask(q, 16, 8))
    with pytest.raises(ValueError):
        m(torch.randn(2, 11))


def test_sent_symbols_unit_power():
    m = small()
    out = m(torch.randn(6, 12, dtype=torch.float32))
    for b in range(6):
        k = int(out.mask[b].sum())
        if k:
            assert (out.sent[b, :k] ** 2).mean().item() == pytest.approx(1.0, rel=1e-5)
        assert (out.sent[b, k:] == 0).all()


def test_physical_shortening_matches_static_path_noiseless():
    m = small().double()
    x = torch.randn(9, 12, dtype=torch.float64)
    frames = m.encode(x)
    static = m(x)
    for f, mask in zip(frames, static.mask):
        assert f.n_kept == int(mask.sum())
        assert f.kept.numel() == ratequant.mask_popcount(f.quant, 16, 8)
    assert torch.allclose(m.decode(frames), static.x_hat, atol=1e-12)


def test_physical_shortening_matches_static_path_with_noise():
    # the static path sees noise on every position, then re-masks; feeding the
    # kept positions of that same noise to the shortened path must agree
    m = small().double()
    x = torch.randn(5, 12, dtype=torch.float64)
    cfg = ChannelConfig(5.0, seed=1)
    noisy = m(x, channel=lambda z: awgn(z, cfg, 0))
    frames = m.encode(x)
    recv = [f.with_payload(noisy.sent[b][f.mask.astype(bool)] + (
        awgn(torch.zeros_like(noisy.sent), cfg, 0)[b][f.mask.astype(bool)])) for b, f in enumerate(frames)]
    assert torch.allclose(m.decode(recv), noisy.x_hat, atol=1e-12)


def test_transmit_keeps_length_and_is_seeded():
    m = small()
    frames = m.encode(torch.randn(4, 12))
    a = m.transmit(frames, ChannelConfig(0, 2))
    b = m.transmit(frames, ChannelConfig(0, 2))
    for f, fa, fb in zip(frames, a, b):
        assert fa.n_kept == f.n_kept
        assert torch.equal(fa.kept, fb.kept)


def test_fixed_length_mode():
    m = small(rate_allocation=False, fixed_symbols=5)
    assert m.ran is None
    out = m(torch.randn(8, 12))
    assert out.rate is None
    assert out.mask.mean().item() == 5 / 16
    frames = m.encode(torch.randn(3, 12))
    assert all(f.n_kept == 5 and f.quant is None for f in frames)
    assert m.decode(frames).shape == (3, 12)
    with pytest.raises(RuntimeError):
        m.rate_index(torch.randn(1, 12))


def test_fixed_symbols_override_on_variable_codec():
    m = small()
    out = m(torch.randn(4, 12), fixed_symbols=16)
    assert out.mask.min().item() == 1
    with pytest.raises(ValueError):
        m(torch.randn(4, 12), fixed_symbols=17)


def test_quant_override():
    m = small()
    q = torch.tensor([0, 3, 7])
    out = m(torch.randn(3, 12), quant=q)
    assert out.mask.sum(1).tolist() == [ratequant.mask_popcount(int(v), 16, 8) for v in q]
    with pytest.raises(ValueError):
        m(torch.randn(3, 12), quant=torch.zeros(2, dtype=torch.long))


def test_degenerate_frame_roundtrip():
    m = small()
    with torch.no_grad():
        m.ran[-1].bias.fill_(-50.0)  # drive every rate to level 0
    x = torch.randn(3, 12)
    frames = m.encode(x)
    assert all(f.n_kept == 0 and f.degenerate and f.quant == 0 for f in frames)
    out = m.decode(m.transmit(frames, ChannelConfig()))
    assert torch.isfinite(out).all()


def test_rate_path_receives_gradient():
    m = small()
    out = m(torch.randn(32, 12), channel=lambda z: awgn(z, ChannelConfig(10, 0)))
    ((out.x_hat - 1.0) ** 2).mean().backward()
    grads = [p.grad for p in m.ran.parameters()]
    assert all(g is not None for g in grads)
    assert sum(g.abs().sum().item() for g in grads) > 0
