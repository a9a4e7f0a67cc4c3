"""Latent Dyna loop: real collection through a frozen encoder, world-model updates, imagined actor-critic."""

from __future__ import annotations

import contextlib
import copy
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .env import CCSEnv, mask_action
from .metrics import MetricsLog
from .nets import TanhGaussianHead, mlp
from .sac import polyak_update
from .world_models import (
    Ensemble, LatentDataset, ResidualAdapter, WMTrainer, fit_residual_adapter, param_hash,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImaginationConfig:
    horizon: int = 10
    lam: float = 0.95
    gamma: float = 0.99
    batch: int = 8  # start states per imagined rollout
    entropy_coef: float = 1e-3
    lr_actor: float = 1e-4
    lr_critic: float = 3e-4
    wm_steps: int = 50  # world-model gradient steps per epoch
    adapter_steps: int = 300
    min_adapter_tuples: int = 20
    critic_warmup_steps: int = 200
    critic_polyak: float = 0.02  # EMA rate of the target critic that bootstraps lambda-returns

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("imagination horizon must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 < self.critic_polyak <= 1.0:
            raise ValueError("critic_polyak must lie in (0, 1]")


@dataclass(frozen=True)
class DynaBudget:
    epochs: int
    real_steps: int
    imagined_steps: int
    test_episodes: int = 1

    @property
    def total_real(self) -> int:
        return self.epochs * self.real_steps

    @property
    def total_imagined(self) -> int:
        return self.epochs * self.imagined_steps


# Per-epoch counts; the desk presets keep the ratios at minutes scale.
PAPER_NOMINAL = DynaBudget(20, 200, 4000)
PAPER_RETUNE = DynaBudget(20, 40, 3200)
DESK_NOMINAL = DynaBudget(20, 40, 800)
DESK_RETUNE = DynaBudget(20, 8, 640)


class BudgetViolation(RuntimeError):
    pass


def lambda_returns(rewards: torch.Tensor, values: torch.Tensor, gamma: float, lam: float) -> torch.Tensor:
    """TD(lambda) targets over an imagined horizon.

    rewards: (H, ...); values: (H+1, ...) holding V(z_0) .. V(z_H). The last
    value bootstraps the tail.
    """
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError("values must hold one more step than rewards")
    out = [None] * rewards.shape[0]
    nxt = values[-1]
    for t in reversed(range(rewards.shape[0])):
        nxt = rewards[t] + gamma * ((1 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return torch.stack(out)


class LatentActor(nn.Module):
    def __init__(self, latent_dim: int = 128, act_dim: int = 11, hidden: int = 256):
        super().__init__()
        self.latent_dim, self.act_dim, self.hidden = latent_dim, act_dim, hidden
        self.head = TanhGaussianHead(latent_dim, act_dim, hidden)

    @classmethod
    def from_head(cls, head: TanhGaussianHead) -> "LatentActor":
        """Warm start from a deployable controller's policy head (same architecture)."""
        lin = [m for m in head.net if isinstance(m, nn.Linear)]
        actor = cls(lin[0].in_features, lin[-1].out_features // 2, lin[0].out_features)
        actor.head.load_state_dict(head.state_dict())
        return actor

    def forward(self, z, deterministic: bool = False, generator=None):
        return self.head.sample(z, deterministic, generator)


class LatentCritic(nn.Module):
    def __init__(self, latent_dim: int = 128, hidden: int = 256):
        super().__init__()
        self.net = mlp(latent_dim, hidden, 1)

    def forward(self, z):
        return self.net(z).squeeze(-1)


@dataclass
class Counters:
    real: int = 0
    imagined: int = 0
    eval_steps: int = 0
    wm_updates: int = 0
    actor_updates: int = 0


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients into ``module``, restoring each parameter's flag after."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


@contextlib.contextmanager
def forbid_simulator(env):
    """Any simulator call inside the block raises."""
    if env is None:
        yield
        return
    prev = env.forbidden
    env.forbidden = True
    try:
        yield
    finally:
        env.forbidden = prev


def imagine_rollout(z0: torch.Tensor, actor: LatentActor, model, horizon: int, rng: np.random.Generator,
                    generator: torch.Generator | None = None, scenario_id: int = 0,
                    counters: Counters | None = None, record: list | None = None) -> dict:
    """H model steps from z0 with actions from the latent actor; differentiable in the actor."""
    z, state = z0, model.initial_state(z0.shape[0])
    zs, acts, rews, logps = [z0], [], [], []
    for _ in range(horizon):
        a, logp = actor(z, generator=generator)
        a = mask_action(a, scenario_id)
        z, r, state, _ = model.step(state, z, a, rng, generator)
        zs.append(z)
        acts.append(a)
        rews.append(r)
        logps.append(logp)
    if counters is not None:
        counters.imagined += z0.shape[0] * horizon
    if record is not None:
        record.append(torch.stack(acts).detach().reshape(-1, acts[0].shape[-1]).numpy())
    return {"z": torch.stack(zs), "a": torch.stack(acts), "r": torch.stack(rews), "logp": torch.stack(logps)}


class LatentAgent:
    """Actor trained by backpropagating imagined lambda-returns; critic regresses them."""

    def __init__(self, actor: LatentActor, critic: LatentCritic, cfg: ImaginationConfig):
        self.actor, self.critic, self.cfg = actor, critic, cfg
        self.actor_opt = torch.optim.Adam(actor.parameters(), lr=cfg.lr_actor)
        self.critic_opt = torch.optim.Adam(critic.parameters(), lr=cfg.lr_critic)
        self.critic_target = copy.deepcopy(critic).requires_grad_(False)

    def update(self, traj: dict, model: nn.Module) -> dict:
        c = self.cfg
        with frozen(model):
            values = self.critic_target(traj["z"])
            ret = lambda_returns(traj["r"], values, c.gamma, c.lam)
            actor_loss = -(ret.mean() - c.entropy_coef * traj["logp"].mean())
            self.actor_opt.zero_grad()
            actor_loss.backward()
            self.actor_opt.step()

        v = self.critic(traj["z"][:-1].detach())
        critic_loss = ((v - ret.detach()) ** 2).mean()
        self.critic_opt.zero_grad()
        critic_loss.backward()
        self.critic_opt.step()
        polyak_update(self.critic, self.critic_target, c.critic_polyak)
        return {"actor_loss": actor_loss.item(), "critic_loss": critic_loss.item(),
                "imagined_return": ret[0].mean().item()}

    def pretrain_critic(self, ds: LatentDataset, steps: int, batch: int = 64, seed: int = 0):
        """Ground the value head on discounted real returns-to-go before any imagination."""
        if steps <= 0 or len(ds) == 0:
            return
        g = np.zeros(len(ds), dtype=np.float32)
        for seg in ds.segments():
            acc = 0.0
            for k in reversed(seg):
                acc = ds.r[k] + self.cfg.gamma * acc * (1.0 - ds.done[k])
                g[k] = acc
        z, target = torch.as_tensor(ds.z), torch.as_tensor(g)
        rng = np.random.default_rng(seed)
        for _ in range(steps):
            i = rng.integers(0, len(ds), size=min(batch, len(ds)))
            loss = ((self.critic(z[i]) - target[i]) ** 2).mean()
            self.critic_opt.zero_grad()
            loss.backward()
            self.critic_opt.step()
        self.critic_target.load_state_dict(self.critic.state_dict())


# -- real environments seen through a latent ----------------------------------------

class EncodedEnv:
    """CCS environment whose observations pass through a frozen public history encoder."""

    def __init__(self, env: CCSEnv, encoder: nn.Module, expected_hash: str | None = None):
        h = param_hash(encoder)
        if expected_hash is not None and h != expected_hash:
            raise ValueError("encoder hash differs from the one recorded at training time")
        self.env, self.encoder, self.encoder_hash = env, encoder.eval(), h
        self.scenario_id = env.cfg.scenario_id

    @torch.no_grad()
    def _encode(self, obs) -> torch.Tensor:
        H = torch.as_tensor(obs.history, dtype=torch.float32)[None]
        y = torch.as_tensor(obs.well, dtype=torch.float32)[None]
        return self.encoder(H, y)[0]

    @property
    def done(self) -> bool:
        return self.env.done

    @property
    def forbidden(self) -> bool:
        return self.env.forbidden

    @forbidden.setter
    def forbidden(self, v: bool):
        self.env.forbidden = v

    def reset(self, index: int | None = None) -> torch.Tensor:
        return self._encode(self.env.reset(index))

    def step(self, a: np.ndarray):
        obs, r, done, _ = self.env.step(a)
        return self._encode(obs), r, done

    @property
    def last_action(self) -> np.ndarray:
        return self.env.last_action

    @property
    def episode_id(self) -> int:
        return self.env.episodes

    @property
    def t(self) -> int:
        return self.env.t


class LinearGaussianLatentEnv:
    """z' = A z + B a + sigma * eps, reward 1 - w * ||z' - z*||^2 - c * ||a||^2, fixed z0.

    Every constant action has a computable expected return, so a grid search
    over constant actions gives an oracle baseline.
    """

    def __init__(self, A: np.ndarray, B: np.ndarray, z_star: np.ndarray, sigma: float = 0.01,
                 w: float = 1.0, c: float = 0.01, horizon: int = 20, seed: int = 0):
        self.A, self.B, self.z_star = A, B, z_star
        self.sigma, self.w, self.c, self.horizon = sigma, w, c, horizon
        self.rng = np.random.default_rng(seed)
        self.z0 = np.zeros(A.shape[0])
        self.scenario_id = 0
        self.forbidden = False
        self.real_steps = 0
        self.episodes = 0
        self.done = True
        self.t = 0

    @property
    def episode_id(self):
        return self.episodes

    def reset(self, index=None) -> torch.Tensor:
        self.z, self.t, self.done = self.z0.copy(), 0, False
        self.episodes += 1
        return torch.as_tensor(self.z, dtype=torch.float32)

    def reward(self, z_next, a):
        return 1.0 - self.w * float(np.sum((z_next - self.z_star) ** 2)) - self.c * float(np.sum(a ** 2))

    def step(self, a):
        if self.forbidden:
            raise RuntimeError("real environment called inside a forbidden block")
        a = np.clip(np.asarray(a, dtype=np.float64), -1, 1)
        self.last_action = a
        zn = self.A @ self.z + self.B @ a + self.sigma * self.rng.normal(size=self.z.shape)
        r = self.reward(zn, a)
        self.z, self.t = zn, self.t + 1
        self.real_steps += 1
        self.done = self.t >= self.horizon
        return torch.as_tensor(zn, dtype=torch.float32), r, self.done

    def expected_constant_return(self, a: np.ndarray) -> float:
        """Exact expected return of holding action a for the whole episode."""
        z, cov, total = self.z0.copy(), np.zeros((len(self.z0), len(self.z0))), 0.0
        for _ in range(self.horizon):
            z = self.A @ z + self.B @ a
            cov = self.A @ cov @ self.A.T + self.sigma ** 2 * np.eye(len(z))
            total += 1.0 - self.w * (np.sum((z - self.z_star) ** 2) + np.trace(cov)) - self.c * np.sum(a ** 2)
        return float(total)

    def grid_oracle(self, points: int = 41) -> tuple[float, np.ndarray]:
        grid = np.linspace(-1, 1, points)
        mesh = np.stack(np.meshgrid(*[grid] * self.B.shape[1], indexing="ij"), -1).reshape(-1, self.B.shape[1])
        vals = [self.expected_constant_return(a) for a in mesh]
        k = int(np.argmax(vals))
        return vals[k], mesh[k]


# -- Dyna runner -----------------------------------------------------------------------

@torch.no_grad()
def deploy_eval(actor: LatentActor, env, episodes: int = 1, expected_hash: str | None = None,
                record: list | None = None, realization: int | None = 0) -> float:
    """Deterministic episodes through the public encoder; refuses a mismatched encoder."""
    if expected_hash is not None and getattr(env, "encoder_hash", expected_hash) != expected_hash:
        raise ValueError("encoder hash differs from the one recorded at training time")
    total = 0.0
    for _ in range(episodes):
        z = env.reset(realization)
        while not env.done:
            a, _ = actor(z[None], deterministic=True)
            a = mask_action(a[0].numpy().astype(np.float64), env.scenario_id)
            z, r, _ = env.step(a)
            if record is not None:
                record.append((np.asarray(env.last_action).copy(), r))
            total += r
    return total / episodes


def retention_metric(final_return: float, reference_return: float) -> float:
    if reference_return == 0:
        raise ZeroDivisionError("retention needs a nonzero reference return")
    return round(100.0 * final_return / reference_return, 1)


class LatentStore:
    """Growing store of real latent tuples collected during the Dyna loop."""

    def __init__(self):
        self.rows: list[tuple] = []

    def __len__(self):
        return len(self.rows)

    def add(self, z, a, r, zn, done, episode, t):
        self.rows.append((np.asarray(z, np.float32), np.asarray(a, np.float32), float(r),
                          np.asarray(zn, np.float32), float(done), int(episode), int(t)))

    def dataset(self) -> LatentDataset:
        if not self.rows:
            raise ValueError("no real latent tuples collected yet")
        z, a, r, zn, d, e, t = zip(*self.rows)
        return LatentDataset(np.stack(z), np.stack(a), np.array(r, np.float32), np.stack(zn),
                             np.array(d, np.float32), np.array(e, np.int64), np.array(t, np.int64))


class DynaRunner:
    """Epoch loop of real collection, model update and imagination.

    mode ``continue``: keep training the ensemble on offline + fresh tuples
    (nominal training and the injector-loss scenario).
    mode ``adapter``: freeze the ensemble and refit a residual adapter on the
    fresh abnormal tuples (leakage and compartment scenarios).
    """

    def __init__(self, train_env, eval_env, actor: LatentActor, critic: LatentCritic, ensemble: Ensemble,
                 offline: LatentDataset | None, budget: DynaBudget, cfg: ImaginationConfig = ImaginationConfig(),
                 mode: str = "continue", seed: int = 0, trainers: list[WMTrainer] | None = None,
                 record_actions: bool = False, run_dir: Path | None = None, wm_batch: int = 64,
                 header: dict | None = None):
        if mode not in ("continue", "adapter"):
            raise ValueError(f"unknown Dyna mode {mode!r}")
        if budget.imagined_steps % cfg.horizon:
            raise ValueError("imagined steps per epoch must be a multiple of the horizon")
        if eval_env is train_env:
            raise ValueError("evaluation needs its own environment instance")
        self.train_env, self.eval_env = train_env, eval_env
        self.agent = LatentAgent(actor, critic, cfg)
        self.ensemble, self.offline, self.budget, self.cfg, self.mode = ensemble, offline, budget, cfg, mode
        self.scenario_id = train_env.scenario_id
        self.rng = np.random.default_rng(seed)
        self.gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        self.trainers = trainers or [WMTrainer(m, batch=wm_batch, seed=seed * 100 + i)
                                     for i, m in enumerate(ensemble.members)]
        self.store = LatentStore()
        self.counters = Counters()
        self.adapter: ResidualAdapter | None = None
        self.nominal_hash = param_hash(ensemble) if mode == "adapter" else None
        if mode == "adapter":
            ensemble.requires_grad_(False)
        self.record_actions = record_actions
        self.imagined_actions: list[np.ndarray] = []
        self.real_actions: list[np.ndarray] = []
        self.logger = MetricsLog(run_dir, header)
        self._z = None
        self.returns: list[float] = []

    @property
    def model(self):
        return self.adapter if self.adapter is not None else self.ensemble

    def evaluate(self) -> float:
        before = self.eval_env_steps()
        ret = deploy_eval(self.agent.actor, self.eval_env, self.budget.test_episodes)
        self.counters.eval_steps += self.eval_env_steps() - before
        return ret

    def eval_env_steps(self) -> int:
        env = getattr(self.eval_env, "env", self.eval_env)
        return env.real_steps

    def collect(self, n: int):
        env = self.train_env
        for _ in range(n):
            if self._z is None or env.done:
                self._z = env.reset(None)
            with torch.no_grad():
                a, _ = self.agent.actor(self._z[None], generator=self.gen)
            a = mask_action(a[0].numpy().astype(np.float64), self.scenario_id)
            zn, r, done = env.step(a)
            applied = np.asarray(env.last_action, dtype=np.float64)
            if self.record_actions:
                self.real_actions.append(applied.copy())
            self.store.add(self._z.numpy(), applied, r, zn.numpy(), done, env.episode_id, env.t - 1)
            self._z = zn
            self.counters.real += 1

    def update_model(self) -> dict:
        fresh = self.store.dataset()
        if self.mode == "continue":
            ds = LatentDataset.concat([self.offline, fresh]) if self.offline is not None else fresh
            losses = []
            for tr in self.trainers:
                try:
                    losses += tr.fit(ds, self.cfg.wm_steps)
                except ValueError:  # no full-length window yet
                    pass
            self.counters.wm_updates += 1
            return {"wm_loss": float(np.mean(losses)) if losses else None}
        if len(fresh) < self.cfg.min_adapter_tuples:
            return {"adapter": None}
        self.adapter, err = fit_residual_adapter(fresh, self.ensemble, self.cfg.adapter_steps,
                                                 min_tuples=self.cfg.min_adapter_tuples,
                                                 seed=int(self.rng.integers(2 ** 31)))
        if param_hash(self.ensemble) != self.nominal_hash:
            raise RuntimeError("nominal world model changed during adapter fitting")
        self.counters.wm_updates += 1
        return {f"adapter_{k}": v for k, v in err.items()}

    def start_states(self, n: int) -> torch.Tensor:
        pools = [self.store.dataset().z] if len(self.store) else []
        if self.offline is not None and len(self.offline):
            pools.append(self.offline.z)
        pool = np.concatenate(pools)
        return torch.as_tensor(pool[self.rng.integers(0, len(pool), size=n)])

    def imagine(self, n_steps: int) -> list[dict]:
        stats = []
        H = self.cfg.horizon
        starts_left = n_steps // H
        with forbid_simulator(self.train_env), forbid_simulator(self.eval_env):
            while starts_left > 0:
                b = min(self.cfg.batch, starts_left)
                traj = imagine_rollout(self.start_states(b), self.agent.actor, self.model, H, self.rng,
                                       self.gen, self.scenario_id, self.counters,
                                       self.imagined_actions if self.record_actions else None)
                stats.append(self.agent.update(traj, self.model))
                self.counters.actor_updates += 1
                starts_left -= b
        return stats

    def run(self) -> dict:
        B = self.budget
        r0 = self.evaluate()
        self.returns = []
        self.logger.write({"epoch": 0, "eval_return": r0, **asdict(self.counters)})
        if self.offline is not None and self.cfg.critic_warmup_steps:
            self.agent.pretrain_critic(self.offline, self.cfg.critic_warmup_steps,
                                       seed=int(self.rng.integers(2 ** 31)))
        for epoch in range(1, B.epochs + 1):
            t0 = time.perf_counter()
            real0, imag0 = self.counters.real, self.counters.imagined
            self.collect(B.real_steps)
            wm = self.update_model()
            stats = self.imagine(B.imagined_steps)
            if self.counters.real - real0 != B.real_steps or self.counters.imagined - imag0 != B.imagined_steps:
                raise BudgetViolation(f"epoch {epoch}: counters drifted from the configured budget")
            ret = self.evaluate()
            self.returns.append(ret)
            rec = {"epoch": epoch, "eval_return": ret, **asdict(self.counters), **wm}
            if stats:
                rec.update({k: float(np.mean([s[k] for s in stats])) for k in stats[0]})
            self.logger.write(rec, time.perf_counter() - t0)
            log.info("dyna epoch %d return %.3f", epoch, ret)
        if self.counters.real != B.total_real or self.counters.imagined != B.total_imagined:
            raise BudgetViolation("run-end counters differ from the configured budget")
        if self.mode == "adapter" and param_hash(self.ensemble) != self.nominal_hash:
            raise RuntimeError("nominal world model changed during retuning")
        return {"initial_return": r0, "returns": list(self.returns),
                "best": max(self.returns) if self.returns else None,
                "final": self.returns[-1] if self.returns else None,
                "counters": asdict(self.counters)}
