import math

import numpy as np
import pytest
import torch

from ccsrl.nets import (
    Actor, Critic, DistillHeads, GRUGate, GatedTransformerBlock, HistoryEncoder, ObsEncoder,
    SpatialEncoder, TanhGaussianHead, WellEncoder, load_checkpoint, save_checkpoint,
    squashed_log_prob,
)


def n_params(m):
    return sum(p.numel() for p in m.parameters())


def test_parameter_counts_from_layer_formulas():
    d = 64
    assert n_params(WellEncoder(d)) == 30 * d * 3 + d
    conv = lambda i, o: i * o * 27 + o
    assert n_params(SpatialEncoder(64)) == conv(2, 8) + conv(8, 16) + conv(16, 32) + conv(32, 64)
    assert n_params(GRUGate(d)) == 6 * d * d + d
    attn = 4 * d * d + 4 * d
    ffn = d * 256 + 256 + 256 * d + d
    assert n_params(GatedTransformerBlock(d)) == attn + ffn + 2 * (6 * d * d + d) + 4 * d


def test_encoder_shapes():
    y = torch.randn(5, 9, 30)
    H = torch.randn(5, 20, 9, 30)
    x = torch.randn(5, 2, 4, 16, 12)
    assert WellEncoder(64)(y).shape == (5, 64)
    assert SpatialEncoder(64)(x).shape == (5, 64)
    assert SpatialEncoder(64)(torch.randn(2, 2, 3, 8, 6)).shape == (2, 64)
    assert HistoryEncoder(64, "concat")(H, y).shape == (5, 128)
    assert HistoryEncoder(128, "add")(H, y).shape == (5, 128)
    enc = ObsEncoder("spatial_history", 64)
    assert enc(x, H, y).shape == (5, enc.out_dim) and enc.uses_spatial
    with pytest.raises(ValueError):
        WellEncoder(64)(torch.randn(5, 8, 30))
    with pytest.raises(ValueError):
        ObsEncoder("oracle")


def test_gate_saturates_to_identity():
    torch.manual_seed(0)
    g = GRUGate(32, gate_bias=10.0)
    x, y = torch.randn(64, 32), torch.randn(64, 32)
    assert (g(x, y) - x).abs().max().item() <= 1e-3


def test_history_length_one():
    torch.manual_seed(0)
    enc = HistoryEncoder(32, "concat", history_len=20)
    out = enc(torch.randn(3, 1, 9, 30), torch.randn(3, 9, 30))
    assert out.shape == (3, 64) and torch.isfinite(out).all()


def test_history_order_matters():
    torch.manual_seed(0)
    enc = HistoryEncoder(32, "concat", history_len=6)
    H, y = torch.randn(1, 6, 9, 30), torch.randn(1, 9, 30)
    perm = H[:, torch.tensor([1, 0, 2, 3, 4, 5])]
    assert not torch.allclose(enc(H, y), enc(perm, y))


@pytest.mark.parametrize("module,inputs", [
    (lambda: GRUGate(6), lambda: (torch.randn(2, 6), torch.randn(2, 6))),
    (lambda: GatedTransformerBlock(8, 4, 16), lambda: (torch.randn(2, 3, 8),)),
    (lambda: WellEncoder(5), lambda: (torch.randn(2, 9, 30),)),
])
def test_gradients_match_finite_differences(module, inputs):
    torch.manual_seed(0)
    m = module().double()
    args = tuple(a.double().requires_grad_(True) for a in inputs())
    assert torch.autograd.gradcheck(lambda *a: m(*a), args, eps=1e-6, atol=1e-4)


def test_squashed_log_prob_integrates_to_one():
    # 1-D density of a = tanh(u) integrated over a in (-1, 1) by change of variable
    mean, log_std = torch.tensor([[0.3]], dtype=torch.float64), torch.tensor([[-0.2]], dtype=torch.float64)
    u = torch.linspace(-12, 12, 200001, dtype=torch.float64)[:, None]
    da_du = 1 - torch.tanh(u) ** 2
    dens = squashed_log_prob(u, mean, log_std).exp() * da_du.squeeze(-1)
    assert abs(torch.trapezoid(dens, u.squeeze(-1)).item() - 1.0) <= 1e-3


def test_squashed_log_prob_stable_at_large_u():
    u = torch.tensor([[30.0, -30.0]])
    lp = squashed_log_prob(u, torch.zeros(1, 2), torch.zeros(1, 2))
    assert torch.isfinite(lp).all()


def test_tanh_head_bounds_and_clamp():
    torch.manual_seed(0)
    head = TanhGaussianHead(8, 11)
    f = torch.randn(100, 8) * 100
    a, lp = head.sample(f)
    assert a.shape == (100, 11) and a.abs().max() <= 1 and lp.shape == (100,)
    _, log_std = head(f)
    assert log_std.min() >= -20 and log_std.max() <= 2
    a1, _ = head.sample(f[:3], deterministic=True)
    a2, _ = head.sample(f[:3], deterministic=True)
    assert torch.equal(a1, a2)


def test_actor_critic_and_distill_heads():
    torch.manual_seed(0)
    actor = Actor(ObsEncoder("well", 16))
    critic = Critic(ObsEncoder("well", 16))
    y = torch.randn(4, 9, 30)
    a, lp = actor((y,))
    assert critic((y,), a).shape == (4,)
    h = DistillHeads(16, 8, 8)
    assert not any(p.requires_grad for p in h.p_t.parameters())
    assert h.value(h.g_dist(torch.randn(4, 16))).shape == (4, 1)


def test_checkpoint_roundtrip_and_mismatch(tmp_path):
    torch.manual_seed(0)
    m = Actor(ObsEncoder("well", 16))
    save_checkpoint(tmp_path / "ck", {"actor": m}, {"d": 16}, {"step": 3})
    m2 = Actor(ObsEncoder("well", 16))
    assert load_checkpoint(tmp_path / "ck", {"actor": m2}, {"d": 16}) == {"step": 3}
    for p, q in zip(m.parameters(), m2.parameters()):
        assert torch.equal(p, q)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck", {"actor": m2}, {"d": 32})
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck", {"actor": Actor(ObsEncoder("well", 32))})
