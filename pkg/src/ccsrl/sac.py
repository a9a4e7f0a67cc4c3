"""Soft actor-critic with twin critics, target copies, learned temperature and a resettable buffer."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SACHyperparams:
    gamma: float = 0.99
    polyak: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    batch_size: int = 256
    target_entropy: float = -11.0
    updates_per_step: int = 1
    init_alpha: float = 0.1
    warmup_steps: int = 200  # uniform random actions, no updates
    min_buffer: int = 20  # updates wait until the buffer holds this many transitions

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.polyak < 1:
            raise ValueError("polyak rate must lie in (0, 1)")


class ReplayBuffer:
    """Ring buffer of named numpy fields, allocated on first push.

    Every transition also records ``episode`` and ``t`` so contiguous
    sequences can be recovered later.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self._data: dict[str, np.ndarray] = {}
        self.size = 0
        self._cursor = 0
        self.n_resets = 0

    def __len__(self):
        return self.size

    def push(self, transition: dict):
        if not self._data:
            for k, v in transition.items():
                v = np.asarray(v)
                self._data[k] = np.zeros((self.capacity, *v.shape), dtype=v.dtype)
        elif transition.keys() != self._data.keys():
            raise KeyError("transition fields differ from the buffer layout")
        for k, v in transition.items():
            self._data[k][self._cursor] = v
        self._cursor = (self._cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def reset(self):
        self.size = 0
        self._cursor = 0
        self.n_resets += 1

    def sample_indices(self, batch_size: int) -> np.ndarray:
        return self.rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int) -> dict[str, np.ndarray] | None:
        if self.size == 0:
            log.warning("sample() on an empty replay buffer")
            return None
        idx = self.sample_indices(batch_size)
        return {k: v[idx] for k, v in self._data.items()}

    def contents(self) -> dict[str, np.ndarray]:
        """All stored transitions in insertion order."""
        if self.size < self.capacity:
            return {k: v[:self.size].copy() for k, v in self._data.items()}
        order = np.r_[self._cursor:self.capacity, 0:self._cursor]
        return {k: v[order] for k, v in self._data.items()}


def to_torch(batch: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.as_tensor(v, dtype=torch.float32) for k, v in batch.items()}


def critic_td_target(r, done, q1_next, q2_next, next_logp, alpha, gamma):
    """r + (1 - done) * gamma * (min(Q1', Q2') - alpha * log pi(a'|o'))."""
    return r + (1.0 - done) * gamma * (torch.minimum(q1_next, q2_next) - alpha * next_logp)


def polyak_update(online: nn.Module, target: nn.Module, rate: float):
    with torch.no_grad():
        for p, tp in zip(online.parameters(), target.parameters()):
            if p.shape != tp.shape:
                raise ValueError("polyak update between mismatched parameter shapes")
            tp.mul_(1.0 - rate).add_(p, alpha=rate)


def view(batch: dict, keys: tuple[str, ...], nxt: bool = False) -> tuple:
    return tuple(batch[("next_" + k) if nxt else k] for k in keys)


class SACAgent:
    """Generic SAC over named observation fields.

    ``actor_keys`` / ``critic_keys`` select which batch fields each network
    reads; next-step fields are the same names with a ``next_`` prefix.
    """

    def __init__(self, actor: nn.Module, critic1: nn.Module, critic2: nn.Module,
                 actor_keys: tuple[str, ...], critic_keys: tuple[str, ...],
                 hp: SACHyperparams = SACHyperparams()):
        self.hp = hp
        self.actor = actor
        self.critics = nn.ModuleList([critic1, critic2])
        self.targets = copy.deepcopy(self.critics).requires_grad_(False)
        self.actor_keys = actor_keys
        self.critic_keys = critic_keys
        self.log_alpha = torch.tensor(np.log(hp.init_alpha), dtype=torch.float32, requires_grad=True)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=hp.lr_actor)
        self.critic_opt = torch.optim.Adam(self.critics.parameters(), lr=hp.lr_critic)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=hp.lr_alpha)
        self.n_updates = 0

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def td_target(self, batch) -> torch.Tensor:
        with torch.no_grad():
            a2, logp2 = self.actor(view(batch, self.actor_keys, True))
            nxt = view(batch, self.critic_keys, True)
            return critic_td_target(batch["reward"], batch["done"], self.targets[0](nxt, a2),
                                    self.targets[1](nxt, a2), logp2, self.alpha, self.hp.gamma)

    def critic_loss(self, batch) -> torch.Tensor:
        y = self.td_target(batch)
        obs = view(batch, self.critic_keys)
        return sum(((c(obs, batch["action"]) - y) ** 2).mean() for c in self.critics)

    def actor_loss(self, batch):
        a, logp = self.actor(view(batch, self.actor_keys))
        obs = view(batch, self.critic_keys)
        q = torch.minimum(self.critics[0](obs, a), self.critics[1](obs, a))
        return (self.alpha.detach() * logp - q).mean(), logp

    def alpha_loss(self, logp: torch.Tensor) -> torch.Tensor:
        return -(self.log_alpha * (logp.detach() + self.hp.target_entropy)).mean()

    def update(self, batch) -> dict[str, float]:
        if batch is None:
            return {}
        lc = self.critic_loss(batch)
        self.critic_opt.zero_grad()
        lc.backward()
        self.critic_opt.step()

        self.critics.requires_grad_(False)
        la, logp = self.actor_loss(batch)
        self.actor_opt.zero_grad()
        la.backward()
        self.actor_opt.step()
        self.critics.requires_grad_(True)

        lal = self.alpha_loss(logp)
        self.alpha_opt.zero_grad()
        lal.backward()
        self.alpha_opt.step()

        polyak_update(self.critics, self.targets, self.hp.polyak)
        self.n_updates += 1
        return {"critic_loss": lc.item(), "actor_loss": la.item(), "alpha_loss": lal.item(),
                "alpha": self.alpha.item(), "entropy": -logp.mean().item()}

    @torch.no_grad()
    def act(self, obs: tuple, deterministic: bool = False) -> np.ndarray:
        t = tuple(torch.as_tensor(np.asarray(o), dtype=torch.float32).unsqueeze(0) for o in obs)
        a, _ = self.actor(t, deterministic=deterministic)
        return a.squeeze(0).numpy().astype(np.float64)

    def modules(self) -> dict[str, nn.Module]:
        return {"actor": self.actor, "critics": self.critics, "targets": self.targets}

    def state_extra(self) -> dict:
        return {"log_alpha": float(self.log_alpha.item()), "n_updates": self.n_updates}
