"""The five model-free controllers: privileged, well-only, history, masked-critic, teacher-student."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import MetricsLog
from .env import N_ACTIONS, REGIMES, CCSEnv, ObservationBundle
from .nets import Actor, Critic, DistillHeads, ObsEncoder, save_checkpoint
from .sac import ReplayBuffer, SACAgent, SACHyperparams, critic_td_target, polyak_update, to_torch, view

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegimeConfig:
    regime: str
    actor_keys: tuple[str, ...]
    actor_kind: str
    critic_keys: tuple[str, ...]
    critic_kind: str
    d: int = 64
    history_mode: str = "concat"
    teacher_keys: tuple[str, ...] = ()
    teacher_kind: str = ""

    @property
    def deployable(self) -> bool:
        return "spatial" not in self.actor_keys

    @property
    def stored_keys(self) -> set[str]:
        return set(self.actor_keys) | set(self.critic_keys) | set(self.teacher_keys)


REGIME_CONFIGS = {
    "privileged": RegimeConfig("privileged", ("spatial", "well"), "spatial_well",
                               ("spatial", "well"), "spatial_well"),
    "well_only": RegimeConfig("well_only", ("well",), "well", ("well",), "well"),
    "history": RegimeConfig("history", ("history", "well"), "history", ("history", "well"), "history"),
    "masked_critic": RegimeConfig("masked_critic", ("well",), "well", ("spatial", "well"), "spatial_well"),
    "teacher_student": RegimeConfig("teacher_student", ("history", "well"), "history",
                                    ("history", "well"), "history", d=128, history_mode="add",
                                    teacher_keys=("spatial", "history", "well"),
                                    teacher_kind="spatial_history"),
}
assert set(REGIME_CONFIGS) == set(REGIMES)


# -- masking curriculum ------------------------------------------------------------

def mask_spatial(x: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Zero exactly floor(p * nnz) nonzero entries, chosen uniformly without replacement."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("masking ratio must lie in [0, 1]")
    out = np.array(x, copy=True)
    flat = out.reshape(-1)
    nz = np.flatnonzero(flat)
    k = int(math.floor(p * nz.size))
    if k:
        flat[rng.choice(nz, size=k, replace=False)] = 0
    return out


@dataclass(frozen=True)
class CurriculumSchedule:
    stages: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    epochs_per_stage: int = 6
    p_test: float = 1.0

    def __post_init__(self):
        if any(b < a for a, b in zip(self.stages, self.stages[1:])):
            raise ValueError("masking stages must be non-decreasing")

    def stage(self, epoch: int) -> float:
        """Masking ratio for a zero-based epoch."""
        return self.stages[min(epoch // self.epochs_per_stage, len(self.stages) - 1)]

    def is_boundary(self, epoch: int) -> bool:
        return epoch % self.epochs_per_stage == 0 and epoch // self.epochs_per_stage < len(self.stages)


# -- distillation ---------------------------------------------------------------------

@dataclass(frozen=True)
class DistillConfig:
    tau: float = 0.1
    beta: float = 1.0
    e0: int = 22
    e1: int = 30
    w_final: float = 0.1
    latent_dim: int = 64
    proj_dim: int = 64


def distill_weight(epoch: int, e0: int = 22, e1: int = 30, w_final: float = 0.1) -> float:
    """Linear ramp over one-based epochs: 0 up to e0, w_final from e1 on."""
    if epoch <= e0:
        return 0.0
    if epoch >= e1:
        return w_final
    return w_final * (epoch - e0) / (e1 - e0)


def infonce_loss(z_stud: torch.Tensor, z_teach: torch.Tensor, p_s: nn.Module, p_t: nn.Module,
                 tau: float) -> torch.Tensor:
    if z_stud.shape[0] == 0:
        raise ValueError("InfoNCE needs a non-empty batch")
    q = F.normalize(p_s(z_stud), dim=-1)
    k = F.normalize(p_t(z_teach.detach()), dim=-1)
    logits = q @ k.T / tau
    return F.cross_entropy(logits, torch.arange(q.shape[0]))


def teacher_student_critic_losses(batch: dict, actor, teachers, teacher_targets, students,
                                  alpha: torch.Tensor, gamma: float, teacher_keys, pub_keys) -> dict:
    """Teacher SAC loss and student regression onto the same teacher TD target."""
    a = batch["action"]
    with torch.no_grad():
        a2, logp2 = actor(view(batch, pub_keys, True))
        nxt = view(batch, teacher_keys, True)
        y = critic_td_target(batch["reward"], batch["done"], teacher_targets[0](nxt, a2),
                             teacher_targets[1](nxt, a2), logp2, alpha, gamma)
    o_teach = view(batch, teacher_keys)
    o_pub = view(batch, pub_keys)
    return {"target": y,
            "teacher_loss": sum(((q(o_teach, a) - y) ** 2).mean() for q in teachers),
            "student_loss": sum(((q(o_pub, a) - y) ** 2).mean() for q in students)}


def teacher_student_actor_losses(batch: dict, actor, teachers, students, heads, alpha: torch.Tensor,
                                 w_dist: float, tau: float, beta: float, pub_keys) -> dict:
    """Policy loss through the student critics plus the weighted distillation terms.

    Distillation losses are always computed; ``w_dist = 0`` leaves them out of
    the total.
    """
    o_pub = view(batch, pub_keys)
    feat = actor.encoder(*o_pub)
    a_new, logp = actor.head.sample(feat)
    q_stud = torch.minimum(students[0](o_pub, a_new), students[1](o_pub, a_new))
    policy_loss = (alpha.detach() * logp - q_stud).mean()

    z_stud = heads.g_dist(feat)
    with torch.no_grad():
        z_teach = teachers[0].encoder.spatial(batch["spatial"])
    nce = infonce_loss(z_stud, z_teach, heads.p_s, heads.p_t, tau)
    val = ((heads.value(z_stud).squeeze(-1) - q_stud.detach()) ** 2).mean()
    return {"policy_loss": policy_loss, "nce_loss": nce, "value_loss": val,
            "actor_total": policy_loss + w_dist * (nce + beta * val), "logp": logp}


class TeacherStudentAgent:
    """Asymmetric SAC: privileged teacher critics, public student critics and actor."""

    def __init__(self, rc: RegimeConfig, hp: SACHyperparams, dc: DistillConfig, history_len: int = 20):
        self.hp, self.dc, self.rc = hp, dc, rc
        enc = lambda kind: ObsEncoder(kind, rc.d, rc.history_mode, dc.latent_dim, history_len)
        self.actor = Actor(enc(rc.actor_kind))
        self.students = nn.ModuleList([Critic(enc(rc.critic_kind)) for _ in range(2)])
        self.teachers = nn.ModuleList([Critic(enc(rc.teacher_kind)) for _ in range(2)])
        self.student_targets = copy.deepcopy(self.students).requires_grad_(False)
        self.teacher_targets = copy.deepcopy(self.teachers).requires_grad_(False)
        self.heads = DistillHeads(self.actor.encoder.out_dim, dc.latent_dim, dc.proj_dim)
        self.log_alpha = torch.tensor(np.log(hp.init_alpha), dtype=torch.float32, requires_grad=True)
        self.actor_keys = rc.actor_keys
        self.actor_opt = torch.optim.Adam(
            list(self.actor.parameters()) + [p for p in self.heads.parameters() if p.requires_grad],
            lr=hp.lr_actor)
        self.critic_opt = torch.optim.Adam(
            list(self.teachers.parameters()) + list(self.students.parameters()), lr=hp.lr_critic)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=hp.lr_alpha)
        self.w_dist = 0.0
        self.n_updates = 0

    @property
    def alpha(self):
        return self.log_alpha.exp()

    def update(self, batch) -> dict[str, float]:
        if batch is None:
            return {}
        rc = self.rc
        C = teacher_student_critic_losses(batch, self.actor, self.teachers, self.teacher_targets,
                                          self.students, self.alpha, self.hp.gamma,
                                          rc.teacher_keys, rc.actor_keys)
        self.critic_opt.zero_grad()
        (C["teacher_loss"] + C["student_loss"]).backward()
        self.critic_opt.step()

        self.students.requires_grad_(False)
        A = teacher_student_actor_losses(batch, self.actor, self.teachers, self.students, self.heads,
                                         self.alpha, self.w_dist, self.dc.tau, self.dc.beta,
                                         rc.actor_keys)
        self.actor_opt.zero_grad()
        A["actor_total"].backward()
        self.actor_opt.step()
        self.students.requires_grad_(True)

        lal = -(self.log_alpha * (A["logp"].detach() + self.hp.target_entropy)).mean()
        self.alpha_opt.zero_grad()
        lal.backward()
        self.alpha_opt.step()
        polyak_update(self.teachers, self.teacher_targets, self.hp.polyak)
        polyak_update(self.students, self.student_targets, self.hp.polyak)
        self.n_updates += 1
        out = {k: C[k].item() for k in ("teacher_loss", "student_loss")}
        out.update({k: A[k].item() for k in ("policy_loss", "nce_loss", "value_loss", "actor_total")})
        out.update(alpha=self.alpha.item(), entropy=-A["logp"].mean().item())
        return out

    @torch.no_grad()
    def act(self, obs: tuple, deterministic: bool = False) -> np.ndarray:
        t = tuple(torch.as_tensor(np.asarray(o), dtype=torch.float32).unsqueeze(0) for o in obs)
        return self.actor(t, deterministic=deterministic)[0].squeeze(0).numpy().astype(np.float64)

    def modules(self) -> dict[str, nn.Module]:
        return {"actor": self.actor, "students": self.students, "teachers": self.teachers,
                "student_targets": self.student_targets, "teacher_targets": self.teacher_targets,
                "heads": self.heads}

    def state_extra(self) -> dict:
        return {"log_alpha": float(self.log_alpha.item()), "n_updates": self.n_updates}


def build_agent(regime: str, hp: SACHyperparams = SACHyperparams(), dc: DistillConfig = DistillConfig(),
                history_len: int = 20):
    if regime not in REGIME_CONFIGS:
        raise ValueError(f"unknown regime {regime!r}")
    rc = REGIME_CONFIGS[regime]
    if regime == "teacher_student":
        return TeacherStudentAgent(rc, hp, dc, history_len)
    enc = lambda kind: ObsEncoder(kind, rc.d, rc.history_mode, 64, history_len)
    return SACAgent(Actor(enc(rc.actor_kind)), Critic(enc(rc.critic_kind)), Critic(enc(rc.critic_kind)),
                    rc.actor_keys, rc.critic_keys, hp)


# -- transitions ----------------------------------------------------------------------

def bundle_view(obs: ObservationBundle, keys) -> tuple:
    return tuple(getattr(obs, k) for k in keys)


def make_transition(rc: RegimeConfig, obs: ObservationBundle, action, reward, nxt: ObservationBundle,
                    done: bool, episode: int, t: int, mask_p: float = 0.0,
                    rng: np.random.Generator | None = None) -> dict:
    tr = {"well": obs.well, "next_well": nxt.well, "action": np.asarray(action, dtype=np.float32),
          "reward": np.float32(reward), "done": np.float32(done), "episode": episode, "t": t}
    if "history" in rc.stored_keys:
        tr["history"] = obs.history
    if "spatial" in rc.stored_keys:
        s, s2 = obs.spatial, nxt.spatial
        if mask_p > 0:
            s, s2 = mask_spatial(s, mask_p, rng), mask_spatial(s2, mask_p, rng)
        tr["spatial"], tr["next_spatial"] = s, s2
    return tr


def batch_to_torch(batch: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    out = to_torch({k: v for k, v in batch.items() if k not in ("episode", "t")})
    if "history" in out:
        out["next_history"] = torch.cat([out["history"][:, 1:], out["next_well"][:, None]], dim=1)
    return out


# -- evaluation --------------------------------------------------------------------------

def evaluate_policy(policy, env: CCSEnv, episodes: int = 1, deterministic: bool = True,
                    actor_keys: tuple[str, ...] = ("well",), record: list | None = None) -> float:
    """Mean undiscounted return; ``policy(obs_tuple, deterministic)`` returns a normalized action."""
    total = 0.0
    for _ in range(episodes):
        obs = env.reset(0 if len(env.realizations) == 1 else None)
        while not env.done:
            a = policy(bundle_view(obs, actor_keys), deterministic)
            obs, r, _, _ = env.step(a)
            if record is not None:
                record.append((env.last_action.copy(), r))
            total += r
    return total / episodes


# -- training ------------------------------------------------------------------------------

@dataclass(frozen=True)
class MFConfig:
    regime: str
    epochs: int = 30
    steps_per_epoch: int = 300
    eval_episodes: int = 1
    seed: int = 0
    hp: SACHyperparams = SACHyperparams()
    curriculum: CurriculumSchedule = CurriculumSchedule()
    distill: DistillConfig = DistillConfig()
    buffer_capacity: int = 0  # 0 keeps every transition of the run

    def __post_init__(self):
        if self.regime not in REGIME_CONFIGS:
            raise ValueError(f"unknown regime {self.regime!r}")


def _mean_losses(stats: list[dict]) -> dict:
    if not stats:
        return {}
    return {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}


def train_model_free(cfg: MFConfig, train_env: CCSEnv, eval_env: CCSEnv, run_dir: Path | None = None,
                     agent=None, buffer: ReplayBuffer | None = None, eval_at_start: bool = False,
                     header: dict | None = None, save_preft: bool = True) -> dict:
    """Epoch loop: collect exactly ``steps_per_epoch`` steps, one update per step, then evaluate.

    Returns a summary with the per-epoch eval returns, stage resets and the
    trained agent. ``agent`` may be a warm-started agent (retuning).
    """
    if eval_env is train_env:
        raise ValueError("evaluation needs its own environment instance")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    rc = REGIME_CONFIGS[cfg.regime]
    agent = agent if agent is not None else build_agent(cfg.regime, cfg.hp, cfg.distill,
                                                        train_env.cfg.history_len)
    total_steps = cfg.epochs * cfg.steps_per_epoch
    capacity = min(total_steps, cfg.buffer_capacity) if cfg.buffer_capacity else total_steps
    buffer = buffer if buffer is not None else ReplayBuffer(max(capacity, 1), seed=cfg.seed)
    logger = MetricsLog(run_dir, header)
    curriculum = cfg.regime == "masked_critic"
    returns, resets, steps = [], [], 0
    obs, ep_ret = None, 0.0  # episodes may straddle epoch boundaries
    summary = {"regime": cfg.regime, "returns": returns, "reset_epochs": resets}

    def policy(o, det):
        return agent.act(o, det)

    if eval_at_start:
        r0 = evaluate_policy(policy, eval_env, cfg.eval_episodes, True, rc.actor_keys)
        summary["initial_return"] = r0
        logger.write({"epoch": 0, "eval_return": r0, "real_steps": 0})

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        mask_p = cfg.curriculum.stage(epoch) if curriculum else 0.0
        if curriculum and cfg.curriculum.is_boundary(epoch):
            buffer.reset()
            resets.append(epoch)
        if isinstance(agent, TeacherStudentAgent):
            agent.w_dist = distill_weight(epoch + 1, cfg.distill.e0, cfg.distill.e1, cfg.distill.w_final)
        stats, ep_returns = [], []
        for _ in range(cfg.steps_per_epoch):
            if obs is None or train_env.done:
                obs, ep_ret = train_env.reset(), 0.0
            if steps < cfg.hp.warmup_steps:
                a = rng.uniform(-1.0, 1.0, N_ACTIONS)
            else:
                a = agent.act(bundle_view(obs, rc.actor_keys), False)
            nxt, r, done, _ = train_env.step(a)
            buffer.push(make_transition(rc, obs, train_env.last_action, r, nxt, done,
                                        train_env.episodes, train_env.t - 1, mask_p, rng))
            obs = nxt
            ep_ret += r
            steps += 1
            if done:
                ep_returns.append(ep_ret)
            if steps >= cfg.hp.warmup_steps and len(buffer) >= cfg.hp.min_buffer:
                for _ in range(cfg.hp.updates_per_step):
                    raw = buffer.sample(cfg.hp.batch_size)
                    stats.append(agent.update(batch_to_torch(raw) if raw is not None else None))
        ret = evaluate_policy(policy, eval_env, cfg.eval_episodes, True, rc.actor_keys)
        returns.append(ret)
        rec = {"epoch": epoch + 1, "eval_return": ret,
               "train_return": float(np.mean(ep_returns)) if ep_returns else None,
               "real_steps": steps, "mask_p": mask_p, "buffer_size": len(buffer), **_mean_losses(stats)}
        if isinstance(agent, TeacherStudentAgent):
            rec["w_dist"] = agent.w_dist
        logger.write(rec, time.perf_counter() - t0)
        log.info("%s epoch %d return %.3f", cfg.regime, epoch + 1, ret)
        if save_preft and run_dir and isinstance(agent, TeacherStudentAgent) and agent.w_dist == 0.0:
            save_checkpoint(Path(run_dir) / "checkpoint_preft", agent.modules(), asdict(cfg),
                            agent.state_extra())
    if run_dir:
        save_checkpoint(Path(run_dir) / "checkpoint", agent.modules(), asdict(cfg), agent.state_extra())
    summary.update(agent=agent, buffer=buffer, real_steps=steps,
                   best=max(returns) if returns else None, final=returns[-1] if returns else None)
    return summary
