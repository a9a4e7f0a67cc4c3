"""Abnormal scenarios: action masking, abnormal data, budget-matched retuning and comparison tables."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .env import CCSEnv, mask_action
from .latent import (
    BudgetViolation, DynaBudget, DynaRunner, EncodedEnv, ImaginationConfig, LatentActor, LatentCritic,
    LatentStore,
)
from .nets import TanhGaussianHead, load_checkpoint
from .sac import SACHyperparams
from .variants import MFConfig, build_agent, train_model_free
from .world_models import Ensemble, LatentDataset, param_hash

log = logging.getLogger(__name__)

SCENARIOS = {0: "Nominal operation", 1: "Known injector-control loss", 2: "Leakage dynamics + reward shift",
             3: "Compartmentalized connectivity shift"}
# injector loss keeps training the world model under the mask; the others adapt a frozen one
DYNA_MODE = {0: "continue", 1: "continue", 2: "adapter", 3: "adapter"}
BACKBONE_NAMES = {"gru": "GRU", "geogru": "GeoGRU", "rssm": "RSSM", "koopman": "Koopman"}
SOURCE_NAMES = {"preft": "Pre-FT", "postft": "Post-FT"}


def apply_injector_mask(a) -> np.ndarray:
    """Pin the third injector (component 10) to its lower bound; other components untouched."""
    return mask_action(a, 1)


def _empty_dataset(d: int, act_dim: int) -> LatentDataset:
    f = np.zeros
    return LatentDataset(f((0, d), np.float32), f((0, act_dim), np.float32), f(0, np.float32),
                         f((0, d), np.float32), f(0, np.float32), f(0, np.int64), f(0, np.int64))


@torch.no_grad()
def collect_abnormal_transitions(env: EncodedEnv, actor: LatentActor, n_steps: int,
                                 expected_hash: str | None = None, budget: int | None = None,
                                 seed: int = 0, deterministic: bool = False) -> LatentDataset:
    """Exactly ``n_steps`` latent tuples from the modified environment, through the frozen encoder."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if budget is not None and n_steps > budget:
        raise BudgetViolation(f"requested {n_steps} real steps with only {budget} left")
    if expected_hash is not None and env.encoder_hash != expected_hash:
        raise ValueError("encoder hash differs from the nominal encoder")
    d = actor.latent_dim
    if n_steps == 0:
        return _empty_dataset(d, actor.act_dim)
    gen = torch.Generator().manual_seed(seed)
    store, z = LatentStore(), None
    for _ in range(n_steps):
        if z is None or env.done:
            z = env.reset(None)
        a, _ = actor(z[None], deterministic=deterministic, generator=gen)
        a = mask_action(a[0].numpy().astype(np.float64), env.scenario_id)
        zn, r, done = env.step(a)
        store.add(z.numpy(), env.last_action, r, zn.numpy(), done, env.episode_id, env.t - 1)
        z = zn
    return store.dataset()


def final_gain(mb_final: float, mf_final: float) -> float:
    return round(mb_final - mf_final, 3)


# -- nominal artifacts and retuning ----------------------------------------------------

@dataclass
class NominalArtifacts:
    """Everything a retuning run reuses from nominal training."""
    encoder: nn.Module
    encoder_hash: str
    head: TanhGaussianHead
    ensemble: Ensemble
    offline: LatentDataset
    backbone: str
    source: str

    def __post_init__(self):
        if param_hash(self.encoder) != self.encoder_hash:
            raise ValueError("encoder hash differs from the one recorded at training time")


def retune_model_based(scenario_id: int, nominal: NominalArtifacts, train_env: CCSEnv, eval_env: CCSEnv,
                       budget: DynaBudget, cfg: ImaginationConfig = ImaginationConfig(), seed: int = 0,
                       run_dir: Path | None = None, record_actions: bool = False,
                       header: dict | None = None) -> dict:
    """Dyna retuning of the nominal latent controller in the abnormal environment.

    The latent actor starts from the nominal actor head, so the epoch-0
    evaluation is the unmodified nominal controller. The nominal ensemble is
    copied; the caller's artifacts are left as they were.
    """
    for env in (train_env, eval_env):
        if env.cfg.scenario_id != scenario_id:
            raise ValueError(f"environment is configured for scenario {env.cfg.scenario_id}, not {scenario_id}")
    if nominal is None or nominal.ensemble is None:
        raise FileNotFoundError("model-based retuning needs nominal encoder, actor and world model")
    torch.manual_seed(seed)
    actor = LatentActor.from_head(nominal.head)
    critic = LatentCritic(nominal.offline.dim, actor.hidden)
    ens = copy.deepcopy(nominal.ensemble).requires_grad_(True)
    runner = DynaRunner(EncodedEnv(train_env, nominal.encoder, nominal.encoder_hash),
                        EncodedEnv(eval_env, nominal.encoder, nominal.encoder_hash),
                        actor, critic, ens, nominal.offline, budget, cfg, mode=DYNA_MODE[scenario_id],
                        seed=seed, record_actions=record_actions, run_dir=run_dir, header=header)
    out = runner.run()
    out["runner"] = runner
    return out


def load_teacher_student(path: Path, hp: SACHyperparams = SACHyperparams(), history_len: int = 20):
    """Teacher-student agent restored from a checkpoint (``<path>.pt`` + ``<path>.json``)."""
    path = Path(path)
    if not path.with_suffix(".pt").exists():
        raise FileNotFoundError(f"no nominal checkpoint at {path}")
    agent = build_agent("teacher_student", hp, history_len=history_len)
    extra = load_checkpoint(path, agent.modules())
    with torch.no_grad():
        agent.log_alpha.fill_(extra.get("log_alpha", float(agent.log_alpha)))
    agent.n_updates = extra.get("n_updates", 0)
    return agent


def retune_model_free(scenario_id: int, checkpoint: Path, train_env: CCSEnv, eval_env: CCSEnv,
                      epochs: int, steps_per_epoch: int, seed: int = 0, hp: SACHyperparams = SACHyperparams(),
                      run_dir: Path | None = None, header: dict | None = None) -> dict:
    """SAC continues from the deployable teacher-student checkpoint with a fresh replay buffer.

    The temperature and target critics come back from the checkpoint; there
    is no random warmup, and epoch 0 evaluates the nominal controller.
    """
    for env in (train_env, eval_env):
        if env.cfg.scenario_id != scenario_id:
            raise ValueError(f"environment is configured for scenario {env.cfg.scenario_id}, not {scenario_id}")
    hp = replace(hp, warmup_steps=0)
    agent = load_teacher_student(checkpoint, hp, train_env.cfg.history_len)
    cfg = MFConfig("teacher_student", epochs=epochs, steps_per_epoch=steps_per_epoch, seed=seed, hp=hp)
    out = train_model_free(cfg, train_env, eval_env, run_dir, agent=agent, eval_at_start=True,
                           header=header, save_preft=False)
    if out["real_steps"] != epochs * steps_per_epoch:
        raise BudgetViolation("model-free retuning consumed a different number of real steps")
    return out


# -- comparison reports ----------------------------------------------------------------

@dataclass
class RunResult:
    name: str
    family: str  # "Model-based" | "Model-free"
    returns: list[float]  # training epochs 1..E
    initial: float | None = None

    @property
    def best(self) -> float:
        return max(self.returns)

    @property
    def final(self) -> float:
        return self.returns[-1]


def mb_run_name(backbone: str, source: str) -> str:
    return f"MB {BACKBONE_NAMES[backbone]} {SOURCE_NAMES[source]}"


@dataclass
class ComparisonReport:
    scenario_id: int
    runs: list[RunResult] = field(default_factory=list)

    @property
    def model_free(self) -> RunResult:
        mf = [r for r in self.runs if r.family == "Model-free"]
        if len(mf) != 1:
            raise ValueError(f"scenario {self.scenario_id} needs exactly one model-free run, found {len(mf)}")
        return mf[0]

    @property
    def model_based(self) -> list[RunResult]:
        return [r for r in self.runs if r.family == "Model-based"]

    def best_model_based(self) -> RunResult:
        mb = self.model_based
        if not mb:
            raise ValueError(f"scenario {self.scenario_id} has no model-based runs")
        return max(mb, key=lambda r: r.final)

    def gain(self) -> float:
        # from the reported 3-decimal finals, so the table recomputes from its own columns
        return final_gain(round(self.best_model_based().final, 3), round(self.model_free.final, 3))

    def rows(self) -> list[tuple[str, str, str, str]]:
        """Run, family, best return, final return: model-based by best return, model-free last."""
        mb = sorted(self.model_based, key=lambda r: -r.best)
        mf = [r for r in self.runs if r.family == "Model-free"]
        return [(r.name, r.family, f"{r.best:.3f}", f"{r.final:.3f}") for r in mb + mf]

    def summary_row(self) -> tuple[str, ...]:
        b, mf = self.best_model_based(), self.model_free
        return (str(self.scenario_id), SCENARIOS[self.scenario_id], b.name.removeprefix("MB "),
                f"{mf.final:.3f}", f"{b.best:.3f}", f"{b.final:.3f}", f"{self.gain():+.3f}")
