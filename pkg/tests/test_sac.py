import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy import stats

from ccsrl.sac import ReplayBuffer, SACAgent, SACHyperparams, critic_td_target, polyak_update


def test_td_target_worked_example():
    y = critic_td_target(torch.tensor([1.0]), torch.tensor([0.0]), torch.tensor([2.0]),
                         torch.tensor([1.5]), torch.tensor([-0.5]), 0.2, 0.5)
    # 1 + 0.5 * (1.5 + 0.1)
    assert y.item() == pytest.approx(1.8)
    y = critic_td_target(torch.tensor([2.0]), torch.tensor([1.0]), torch.tensor([9.0]),
                         torch.tensor([9.0]), torch.tensor([0.0]), 0.2, 0.99)
    assert y.item() == 2.0


def test_polyak_worked_example():
    a, b = nn.Linear(1, 1, bias=False), nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        a.weight.fill_(1.0)
        b.weight.fill_(0.5)
    polyak_update(a, b, 0.5)
    assert b.weight.item() == 0.75
    with pytest.raises(ValueError):
        polyak_update(a, nn.Linear(2, 1, bias=False), 0.5)


def test_buffer_ring_order_and_reset():
    buf = ReplayBuffer(4, seed=0)
    for k in range(6):
        buf.push({"x": np.float32(k)})
    assert len(buf) == 4 and list(buf.contents()["x"]) == [2, 3, 4, 5]
    buf.reset()
    assert len(buf) == 0 and buf.n_resets == 1
    buf.push({"x": np.float32(9)})
    assert list(buf.contents()["x"]) == [9]
    with pytest.raises(KeyError):
        buf.push({"y": 1.0})


def test_empty_buffer_sample_warns(caplog):
    assert ReplayBuffer(3).sample(8) is None
    assert "empty" in caplog.text


def test_buffer_sampling_uniform():
    buf = ReplayBuffer(10, seed=3)
    for k in range(10):
        buf.push({"x": k})
    counts = np.bincount(buf.sample_indices(20000), minlength=10)
    assert stats.chisquare(counts).pvalue > 1e-3


class _Obs(nn.Module):
    def __init__(self):
        super().__init__()
        self.out_dim = 1

    def forward(self, x):
        return x


class _Actor(nn.Module):
    def __init__(self):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(1))
        self.log_std = nn.Parameter(torch.zeros(1))

    def forward(self, obs, deterministic=False):
        from ccsrl.nets import squashed_log_prob
        x = obs[0]
        mean = self.mu.expand(x.shape[0], 1)
        ls = self.log_std.expand(x.shape[0], 1).clamp(-5, 2)
        u = mean if deterministic else mean + ls.exp() * torch.randn_like(mean)
        return torch.tanh(u), squashed_log_prob(u, mean, ls)


class _Critic(nn.Module):
    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2, 32), nn.ReLU(), nn.Linear(32, 1))

    def forward(self, obs, a):
        return self.net(torch.cat([obs[0], a], -1)).squeeze(-1)


def test_bandit_smoke_learns_optimum_and_alpha_positive():
    """One-step bandit with reward -(a - 0.5)^2: the mean action must approach 0.5."""
    torch.manual_seed(0)
    hp = SACHyperparams(batch_size=64, target_entropy=-1.0, init_alpha=0.05, lr_actor=3e-3,
                        lr_critic=3e-3)
    agent = SACAgent(_Actor(), _Critic(), _Critic(), ("obs",), ("obs",), hp)
    buf = ReplayBuffer(5000, seed=0)
    rng = np.random.default_rng(0)
    for step in range(1500):
        a = rng.uniform(-1, 1, 1) if step < 200 else agent.act((np.zeros(1),))
        buf.push({"obs": np.zeros(1, np.float32), "next_obs": np.zeros(1, np.float32),
                  "action": a.astype(np.float32), "reward": np.float32(-(a[0] - 0.5) ** 2),
                  "done": np.float32(1.0)})
        if step >= 200:
            out = agent.update({k: torch.as_tensor(v) for k, v in buf.sample(64).items()})
            assert out["alpha"] > 0
    assert abs(np.tanh(agent.actor.mu.item()) - 0.5) < 0.1
    assert agent.alpha.item() > 0


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        SACHyperparams(gamma=0.0)
    with pytest.raises(ValueError):
        SACHyperparams(polyak=1.0)
    with pytest.raises(ValueError):
        ReplayBuffer(0)
