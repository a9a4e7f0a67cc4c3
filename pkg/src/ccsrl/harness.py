"""Experiment driver: run configuration, seeding, pipelines, reports, plots and the CLI.

Run directory layout under ``$CCSRL_OUT/<experiment>/s<seed>/``::

    mf/<regime>/               model-free training (metrics, checkpoints, latent exports)
    wm/<backbone>_<source>/    pretrained world-model ensembles
    mb/<backbone>_<source>/    nominal model-based runs
    retune/s<k>/mf             model-free retuning in scenario k
    retune/s<k>/mb_<backbone>_<source>
    reports/  plots/

Every run directory holds the ``config.json`` it was produced under; every
metrics log starts with a header carrying the seed and config hash.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .env import CCSEnv, EnvConfig, REGIMES
from .latent import (
    DESK_NOMINAL, DESK_RETUNE, PAPER_NOMINAL, PAPER_RETUNE, BudgetViolation, DynaBudget, ImaginationConfig,
    EncodedEnv, LatentActor, deploy_eval, retention_metric,
)
from .metrics import CorruptLog, best_final, read_metrics
from .nets import config_hash, load_checkpoint, mlp, save_checkpoint
from .reservoir import GridGeometry, GeologyConfig, generate_ensemble, save_geology
from .sac import SACHyperparams
from .scenarios import (
    BACKBONE_NAMES, SOURCE_NAMES, ComparisonReport, NominalArtifacts, RunResult, load_teacher_student,
    mb_run_name, retune_model_based, retune_model_free,
)
from .variants import REGIME_CONFIGS, MFConfig, build_agent, evaluate_policy, train_model_free
from .world_models import (
    BACKBONES, Ensemble, LatentDataset, WMConfig, build_ensemble, encode_transitions, param_hash,
    pretrain_ensemble,
)

log = logging.getLogger(__name__)

RUN_SCHEMA = "ccsrl.run/1"
OUT_ENV = "CCSRL_OUT"
SOURCES = ("preft", "postft")
DESK_GRID = (12, 9, 3, 400.0, 400.0, 20.0)
FIELD_DIM = 32  # coarse field: 2 channels x 4 x 4
REGIME_LABELS = {"privileged": "Privileged-state benchmark", "well_only": "Well-only baseline",
                 "history": "History-conditioned model", "masked_critic": "Masked-critic curriculum",
                 "teacher_student": "Teacher-student model"}


def child_seed(seed: int, name: str) -> int:
    """Seed of a named subsystem, derived from the run seed through SeedSequence."""
    key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([seed, key]).generate_state(1)[0] % 2 ** 31)


# -- budgets -------------------------------------------------------------------------

@dataclass(frozen=True)
class BudgetPlan:
    mf: dict  # regime -> (epochs, steps per epoch)
    nominal: DynaBudget
    retune: DynaBudget
    mf_retune: tuple[int, int]


def budget_plan(paper: bool) -> BudgetPlan:
    """Desk budgets keep the per-epoch real/imagined ratios of the full budgets at 1/5 the real steps."""
    if paper:
        mf = {r: (30, 6000 if r in ("privileged", "well_only") else 3000) for r in REGIMES}
        return BudgetPlan(mf, PAPER_NOMINAL, PAPER_RETUNE, (PAPER_RETUNE.epochs, PAPER_RETUNE.real_steps))
    return BudgetPlan({r: (30, 300) for r in REGIMES}, DESK_NOMINAL, DESK_RETUNE,
                      (DESK_RETUNE.epochs, DESK_RETUNE.real_steps))


def plan_totals(plan: BudgetPlan) -> dict:
    dyna = lambda b: {"real": b.total_real, "imagined": b.total_imagined,
                      "imagined_per_epoch": b.imagined_steps}
    return {"mf": {r: e * s for r, (e, s) in plan.mf.items()},
            "scenario0": dyna(plan.nominal), "retune_mb": dyna(plan.retune),
            "retune_mf": {"real": plan.mf_retune[0] * plan.mf_retune[1]}}


# -- configuration ---------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    experiment: str = "default"
    seed: int = 0
    geology_seed: int | None = None  # None: derived from the run seed
    nominal_seed: int | None = None  # reuse another seed's nominal teacher-student and world models
    paper_budget: bool = False
    grid: tuple = DESK_GRID
    n_train: int = 4
    batch_size: int = 32
    warmup_steps: int = 200
    mf_epochs: int | None = None  # overrides of the budget plan (tests, smoke runs)
    mf_steps: int | None = None
    dyna_epochs: int | None = None
    ensemble_size: int = 3
    wm_steps: int = 2000
    wm_batch: int = 64
    imagination: dict = field(default_factory=dict)  # ImaginationConfig overrides
    schema: str = RUN_SCHEMA

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if d.get("schema") != RUN_SCHEMA:
            raise ValueError(f"unsupported run config schema {d.get('schema')!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys {sorted(unknown)}")
        d = dict(d)
        d["grid"] = tuple(d.get("grid", DESK_GRID))
        return cls(**d)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def plan(self) -> BudgetPlan:
        p = budget_plan(self.paper_budget)
        if self.mf_epochs is not None or self.mf_steps is not None:
            p = replace(p, mf={r: (self.mf_epochs or e, self.mf_steps or s) for r, (e, s) in p.mf.items()})
        if self.dyna_epochs is not None:
            p = replace(p, nominal=replace(p.nominal, epochs=self.dyna_epochs),
                        retune=replace(p.retune, epochs=self.dyna_epochs),
                        mf_retune=(self.dyna_epochs, p.mf_retune[1]))
        return p

    @property
    def root(self) -> Path:
        return Path(os.environ.get(OUT_ENV, "runs")) / self.experiment

    @property
    def seed_dir(self) -> Path:
        return self.root / f"s{self.seed}"

    @property
    def nominal_dir(self) -> Path:
        return self.root / f"s{self.seed if self.nominal_seed is None else self.nominal_seed}"

    def header(self, run: str) -> dict:
        return {"seed": self.seed, "config_hash": self.hash, "run": run}

    def sac(self) -> SACHyperparams:
        return SACHyperparams(batch_size=self.batch_size, warmup_steps=self.warmup_steps)

    def imagination_cfg(self) -> ImaginationConfig:
        return ImaginationConfig(**self.imagination)


def write_config(cfg: RunConfig, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = {**cfg.to_dict(), "config_hash": cfg.hash}
    (run_dir / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- geology and environments ----------------------------------------------------------

def geology(cfg: RunConfig):
    grid = GridGeometry(*cfg.grid)
    gseed = cfg.geology_seed if cfg.geology_seed is not None else child_seed(cfg.seed, "geology")
    train, target = generate_ensemble(gseed, cfg.n_train, child_seed(gseed, "target"), grid)
    return grid, train, target


def make_envs(cfg: RunConfig, scenario: int, on_target: bool) -> tuple[CCSEnv, CCSEnv]:
    """(train, eval) environments. Nominal training draws training realizations; retuning and
    every evaluation run on the held-out target realization."""
    grid, train, target = geology(cfg)
    ec = EnvConfig(scenario_id=scenario)
    tr = CCSEnv(grid, [target] if on_target else train, ec, seed=child_seed(cfg.seed, f"env/train/{scenario}"))
    ev = CCSEnv(grid, [target], ec, seed=child_seed(cfg.seed, f"env/eval/{scenario}"))
    return tr, ev


def _check_geology(cfg: RunConfig, nominal_dir: Path):
    """A shared nominal must have been trained on the same fields."""
    rec = nominal_dir / "geology.json"
    if not rec.exists():
        return
    grid, train, target = geology(cfg)
    sums = [r["sha256"] for r in json.loads(rec.read_text())["realizations"]]
    if sums != [r.checksum() for r in train + [target]]:
        raise ValueError(f"nominal artifacts in {nominal_dir} were trained on different geology")


# -- pipelines -------------------------------------------------------------------------------

def train_mf(cfg: RunConfig, regime: str) -> dict:
    epochs, steps = cfg.plan.mf[regime]
    run_dir = cfg.seed_dir / "mf" / regime
    write_config(cfg, run_dir)
    grid, train, target = geology(cfg)
    save_geology(cfg.seed_dir / "geology.json", grid, GeologyConfig(), train + [target])
    tr, ev = make_envs(cfg, 0, on_target=False)
    mfc = MFConfig(regime, epochs, steps, seed=child_seed(cfg.seed, f"mf/{regime}"), hp=cfg.sac())
    out = train_model_free(mfc, tr, ev, run_dir, header=cfg.header(f"mf/{regime}"))
    if regime == "teacher_student":
        export_latents(cfg, run_dir, out["buffer"].contents())
    return out


def export_latents(cfg: RunConfig, run_dir: Path, contents: dict):
    """Encode the teacher-student replay data with the pre- and post-fine-tuning public encoders."""
    hashes = {}
    for src, ckpt in (("preft", "checkpoint_preft"), ("postft", "checkpoint")):
        agent = load_teacher_student(run_dir / ckpt, cfg.sac())
        ds = encode_transitions(agent.actor.encoder, contents, with_field=True)
        ds.save(run_dir / f"latent_{src}.bin")
        hashes[src] = param_hash(agent.actor.encoder)
    (run_dir / "encoders.json").write_text(json.dumps(
        {"seed": cfg.seed, "config_hash": cfg.hash, "encoders": hashes}, indent=1, sort_keys=True) + "\n")


def _ts_dir(cfg: RunConfig) -> Path:
    d = cfg.nominal_dir / "mf" / "teacher_student"
    if not (d / "checkpoint.pt").exists():
        raise FileNotFoundError(f"no nominal teacher-student run in {d}; run train-mf --regime teacher_student")
    _check_geology(cfg, cfg.nominal_dir)
    return d


def ensemble_skeleton(backbone: str, k: int, wcfg: WMConfig) -> Ensemble:
    ens = build_ensemble(backbone, k, wcfg)
    if backbone == "geogru":
        for m in ens.members:
            m.set_decoder(mlp(wcfg.latent_dim, 256, FIELD_DIM, layers=1))
    return ens


def pretrain_wm(cfg: RunConfig, backbone: str, source: str) -> dict:
    ts = _ts_dir(cfg)
    ds = LatentDataset.load(ts / f"latent_{source}.bin")
    run_dir = cfg.nominal_dir / "wm" / f"{backbone}_{source}"
    write_config(cfg, run_dir)
    wcfg = WMConfig(latent_dim=ds.dim)
    seed = child_seed(cfg.nominal_seed if cfg.nominal_seed is not None else cfg.seed, f"wm/{backbone}/{source}")
    ens, trainers = pretrain_ensemble(ds, backbone, cfg.ensemble_size, cfg.wm_steps, wcfg, seed, cfg.wm_batch)
    info = {"seed": cfg.seed, "config_hash": cfg.hash, "backbone": backbone, "source": source,
            "tuples": len(ds), "train_loss": [tr.evaluate(ds) for tr in trainers]}
    save_checkpoint(run_dir / "ensemble", {"ensemble": ens},
                    {"backbone": backbone, "k": cfg.ensemble_size, "wm": asdict(wcfg)}, info)
    (run_dir / "info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return info


def load_nominal(cfg: RunConfig, backbone: str, source: str) -> NominalArtifacts:
    ts = _ts_dir(cfg)
    agent = load_teacher_student(ts / ("checkpoint_preft" if source == "preft" else "checkpoint"), cfg.sac())
    hashes = json.loads((ts / "encoders.json").read_text())["encoders"]
    ds = LatentDataset.load(ts / f"latent_{source}.bin")
    wm = cfg.nominal_dir / "wm" / f"{backbone}_{source}" / "ensemble"
    if not wm.with_suffix(".pt").exists():
        raise FileNotFoundError(f"no pretrained world model at {wm}; run pretrain-wm")
    ens = ensemble_skeleton(backbone, cfg.ensemble_size, WMConfig(latent_dim=ds.dim))
    load_checkpoint(wm, {"ensemble": ens})
    return NominalArtifacts(agent.actor.encoder, hashes[source], agent.actor.head, ens, ds, backbone, source)


def _save_actor(run_dir: Path, actor: LatentActor, cfg: RunConfig, extra: dict):
    save_checkpoint(run_dir / "actor", {"actor": actor},
                    {"latent_dim": actor.latent_dim, "act_dim": actor.act_dim, "hidden": actor.hidden,
                     "run_config": cfg.hash}, extra)


def train_mb(cfg: RunConfig, backbone: str, source: str) -> dict:
    """Nominal (scenario 0) Dyna loop on the training realizations, evaluated on the target."""
    nominal = load_nominal(cfg, backbone, source)
    run_dir = cfg.seed_dir / "mb" / f"{backbone}_{source}"
    write_config(cfg, run_dir)
    tr, ev = make_envs(cfg, 0, on_target=False)
    out = retune_model_based(0, nominal, tr, ev, cfg.plan.nominal, cfg.imagination_cfg(),
                             child_seed(cfg.seed, f"mb/{backbone}/{source}"), run_dir,
                             header=cfg.header(f"mb/{backbone}_{source}"))
    _save_actor(run_dir, out["runner"].agent.actor, cfg, {"encoder_hash": nominal.encoder_hash})
    return out


def retune(cfg: RunConfig, scenario: int, family: str, backbone: str = "gru", source: str = "postft",
           record_actions: bool = False) -> dict:
    if scenario not in (1, 2, 3):
        raise ValueError("retuning scenarios are 1, 2 and 3")
    plan = cfg.plan
    tr, ev = make_envs(cfg, scenario, on_target=True)
    base = cfg.seed_dir / "retune" / f"s{scenario}"
    if family == "mf":
        run_dir = base / "mf"
        write_config(cfg, run_dir)
        e, s = plan.mf_retune
        out = retune_model_free(scenario, _ts_dir(cfg) / "checkpoint", tr, ev, e, s,
                                child_seed(cfg.seed, f"retune/{scenario}/mf"), cfg.sac(), run_dir,
                                header=cfg.header(f"retune/s{scenario}/mf"))
        out["env"], out["eval_env"] = tr, ev
        return out
    nominal = load_nominal(cfg, backbone, source)
    run_dir = base / f"mb_{backbone}_{source}"
    write_config(cfg, run_dir)
    out = retune_model_based(scenario, nominal, tr, ev, plan.retune, cfg.imagination_cfg(),
                             child_seed(cfg.seed, f"retune/{scenario}/mb/{backbone}/{source}"), run_dir,
                             record_actions, cfg.header(f"retune/s{scenario}/mb_{backbone}_{source}"))
    _save_actor(run_dir, out["runner"].agent.actor, cfg, {"encoder_hash": nominal.encoder_hash})
    out["env"], out["eval_env"] = tr, ev
    return out


def evaluate(cfg: RunConfig, scenario: int, regime: str | None = None, backbone: str | None = None,
             source: str = "postft", episodes: int = 1) -> float:
    """Deterministic return of a saved controller on the target realization under a scenario."""
    _, ev = make_envs(cfg, scenario, on_target=True)
    if regime is not None:
        ckpt = cfg.seed_dir / "mf" / regime / "checkpoint"
        if regime == "teacher_student":
            agent = load_teacher_student(ckpt, cfg.sac())
        else:
            agent = build_agent(regime, cfg.sac())
            load_checkpoint(ckpt, agent.modules())
        return evaluate_policy(lambda o, d: agent.act(o, d), ev, episodes, True, REGIME_CONFIGS[regime].actor_keys)
    if backbone is None:
        raise ValueError("evaluate needs --regime or --backbone")
    run_dir = cfg.seed_dir / "mb" / f"{backbone}_{source}"
    nominal = load_nominal(cfg, backbone, source)
    meta = json.loads((run_dir / "actor.json").read_text())["config"]
    actor = LatentActor(meta["latent_dim"], meta["act_dim"], meta["hidden"])
    load_checkpoint(run_dir / "actor", {"actor": actor})
    return deploy_eval(actor, EncodedEnv(ev, nominal.encoder, nominal.encoder_hash), episodes)


# -- reports (pure functions of logs) ------------------------------------------------------

def markdown_table(headers: list[str], rows: list[tuple]) -> str:
    out = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(out) + "\n"


def model_free_rows(mf: dict[str, tuple[float, float]]) -> list[tuple]:
    """Regime, best, final in the fixed regime order; mf maps regime -> (best, final)."""
    return [(REGIME_LABELS[r], f"{mf[r][0]:.3f}", f"{mf[r][1]:.3f}") for r in REGIMES if r in mf]


def retention_rows(mb: dict[tuple[str, str], tuple[float, float]], reference: float) -> list[tuple]:
    """Backbone, latent source, best, final, retention against the reference final return, by final."""
    items = sorted(mb.items(), key=lambda kv: -kv[1][1])
    return [(BACKBONE_NAMES[b], SOURCE_NAMES[s], f"{best:.3f}", f"{final:.3f}",
             f"{retention_metric(final, reference):.1f}") for (b, s), (best, final) in items]


def _returns(records: list[dict]) -> list[float]:
    return [r["eval_return"] for r in records if r["epoch"] >= 1]


def _scan(base: Path, pattern: str) -> dict[str, tuple[dict, list[dict]]]:
    return {p.parent.name: read_metrics(p) for p in sorted(base.glob(pattern))}


def scenario_report(scenario: int, logs: dict[str, list[dict]]) -> ComparisonReport:
    """logs: run directory name (``mf`` or ``mb_<backbone>_<source>``) -> epoch records."""
    rep = ComparisonReport(scenario)
    for name, recs in sorted(logs.items()):
        if name == "mf":
            rep.runs.append(RunResult("MF retuning", "Model-free", _returns(recs)))
        else:
            backbone, source = name.removeprefix("mb_").split("_")
            rep.runs.append(RunResult(mb_run_name(backbone, source), "Model-based", _returns(recs)))
    return rep


def _stamp(headers: list[dict]) -> str:
    seeds = sorted({h.get("seed") for h in headers if h.get("seed") is not None})
    hashes = sorted({h.get("config_hash") for h in headers if h.get("config_hash")})
    return f"<!-- seed: {','.join(map(str, seeds))}; config: {','.join(hashes)} -->\n"


def build_reports(seed_dir: Path, scenario: int | None = None) -> dict[str, str]:
    """Report name -> markdown text, computed only from the metrics logs under seed_dir."""
    reports = {}
    if scenario is None or scenario == 0:
        mf = _scan(seed_dir / "mf", "*/metrics.jsonl")
        if mf:
            reports["model_free"] = _stamp([h for h, _ in mf.values()]) + markdown_table(
                ["Method", "Best return", "Final return"],
                model_free_rows({k: best_final(v) for k, (_, v) in mf.items()}))
        mb = _scan(seed_dir / "mb", "*/metrics.jsonl")
        if mb and "teacher_student" in mf:
            ref = best_final(mf["teacher_student"][1])[1]
            vals = {tuple(k.split("_")): best_final(v) for k, (_, v) in mb.items()}
            reports["retention"] = _stamp([h for h, _ in mb.values()]) + f"reference final return: {ref:.3f}\n\n" \
                + markdown_table(["Model", "Latent source", "Best return", "Final return", "Retention (%)"],
                                 retention_rows(vals, ref))
    summary, stamps = [], []
    for k in (1, 2, 3):
        if scenario not in (None, k):
            continue
        runs = _scan(seed_dir / "retune" / f"s{k}", "*/metrics.jsonl")
        if not runs:
            continue
        rep = scenario_report(k, {n: v for n, (_, v) in runs.items()})
        reports[f"scenario{k}"] = _stamp([h for h, _ in runs.values()]) + markdown_table(
            ["Run", "Family", "Best return", "Final return"], rep.rows())
        if rep.model_based and any(r.family == "Model-free" for r in rep.runs):
            summary.append(rep.summary_row())
            stamps += [h for h, _ in runs.values()]
    if summary:
        reports["scenario_summary"] = _stamp(stamps) + markdown_table(
            ["Scenario", "Abnormality", "Best final MB variant", "MF retuning final", "MB best return",
             "MB final return", "Final gain"], summary)
    return reports


def write_reports(seed_dir: Path, scenario: int | None = None) -> list[Path]:
    out = seed_dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in build_reports(seed_dir, scenario).items():
        p = out / f"{name}.md"
        p.write_text(text)
        paths.append(p)
    return paths


def write_plots(seed_dir: Path) -> list[Path]:
    """Return-vs-epoch figures, one per run group (mf, mb, retune/s<k>)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict[str, list[Path]] = {}
    for p in sorted(seed_dir.glob("**/metrics.jsonl")):
        rel = p.parent.relative_to(seed_dir)
        groups.setdefault("_".join(rel.parts[:-1]), []).append(p)
    out = seed_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for group, logs in groups.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        stamps = []
        for p in logs:
            header, recs = read_metrics(p)
            stamps.append(f"{header.get('run')}:seed={header.get('seed')}:config={header.get('config_hash')}")
            ax.plot([r["epoch"] for r in recs], [r["eval_return"] for r in recs], marker=".", label=p.parent.name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("evaluation return")
        ax.set_title(group)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{group}.png"
        fig.savefig(path, metadata={"Description": "; ".join(stamps)})
        plt.close(fig)
        paths.append(path)
    return paths


# -- CLI -------------------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--experiment", default="default")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--geology-seed", type=int)
    common.add_argument("--nominal-seed", type=int, help="reuse this seed's nominal teacher-student and world models")
    common.add_argument("--paper-budget", action="store_true", help="full-scale step budgets")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--grid", help="nx,ny,nz,dx,dy,dz")
    common.add_argument("--n-train", type=int, default=4)
    common.add_argument("--batch-size", type=int, default=32)
    common.add_argument("--warmup-steps", type=int, default=200)
    common.add_argument("--mf-epochs", type=int)
    common.add_argument("--mf-steps", type=int)
    common.add_argument("--dyna-epochs", type=int)
    common.add_argument("--wm-steps", type=int, default=2000)
    common.add_argument("--dry-run", action="store_true", help="print the budget plan and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ccsrl", description="CO2-storage control experiments")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("train-mf", parents=[common])
    s.add_argument("--regime", choices=REGIMES, required=True)
    s = sub.add_parser("pretrain-wm", parents=[common])
    s.add_argument("--backbone", choices=BACKBONES, required=True)
    s.add_argument("--source", choices=SOURCES, default="postft")
    s = sub.add_parser("train-mb", parents=[common])
    s.add_argument("--backbone", choices=BACKBONES, required=True)
    s.add_argument("--source", choices=SOURCES, default="postft")
    s = sub.add_parser("retune", parents=[common])
    s.add_argument("--scenario", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--family", choices=("mf", "mb"), required=True)
    s.add_argument("--backbone", choices=BACKBONES, default="gru")
    s.add_argument("--source", choices=SOURCES, default="postft")
    s = sub.add_parser("evaluate", parents=[common])
    s.add_argument("--scenario", type=int, choices=(0, 1, 2, 3), default=0)
    s.add_argument("--regime", choices=REGIMES)
    s.add_argument("--backbone", choices=BACKBONES)
    s.add_argument("--source", choices=SOURCES, default="postft")
    s = sub.add_parser("report", parents=[common])
    s.add_argument("--scenario", type=int, choices=(0, 1, 2, 3))
    sub.add_parser("plot", parents=[common])
    return p


def config_from_args(args) -> RunConfig:
    kw = dict(experiment=args.experiment, seed=args.seed, geology_seed=args.geology_seed,
              nominal_seed=args.nominal_seed, paper_budget=args.paper_budget, n_train=args.n_train,
              batch_size=args.batch_size, warmup_steps=args.warmup_steps, mf_epochs=args.mf_epochs, mf_steps=args.mf_steps,
              dyna_epochs=args.dyna_epochs, wm_steps=args.wm_steps)
    if args.grid:
        v = [float(x) for x in args.grid.split(",")]
        if len(v) != 6:
            raise ValueError("--grid needs nx,ny,nz,dx,dy,dz")
        kw["grid"] = (int(v[0]), int(v[1]), int(v[2]), v[3], v[4], v[5])
    return RunConfig(**kw)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)  # unknown commands and flags exit with status 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    saved_out = os.environ.get(OUT_ENV)
    if args.out:
        os.environ[OUT_ENV] = args.out
    try:
        cfg = config_from_args(args)
        if args.dry_run:
            print(json.dumps(plan_totals(cfg.plan), indent=1, sort_keys=True))
            return 0
        cmd = args.command
        if cmd == "train-mf":
            out = train_mf(cfg, args.regime)
            print(f"{args.regime}: best {out['best']:.3f} final {out['final']:.3f} real steps {out['real_steps']}")
        elif cmd == "pretrain-wm":
            info = pretrain_wm(cfg, args.backbone, args.source)
            print(f"{args.backbone}/{args.source}: {info['tuples']} tuples, loss {np.mean(info['train_loss']):.4f}")
        elif cmd == "train-mb":
            out = train_mb(cfg, args.backbone, args.source)
            print(f"{args.backbone}/{args.source}: best {out['best']:.3f} final {out['final']:.3f} "
                  f"counters {out['counters']}")
        elif cmd == "retune":
            out = retune(cfg, args.scenario, args.family, args.backbone, args.source)
            print(f"scenario {args.scenario} {args.family}: initial {out['initial_return']:.3f} "
                  f"best {out['best']:.3f} final {out['final']:.3f}")
        elif cmd == "evaluate":
            print(f"{evaluate(cfg, args.scenario, args.regime, args.backbone, args.source):.6f}")
        elif cmd == "report":
            for p in write_reports(cfg.seed_dir, args.scenario):
                print(p)
        elif cmd == "plot":
            for p in write_plots(cfg.seed_dir):
                print(p)
    except (BudgetViolation, CorruptLog, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if saved_out is None:
            os.environ.pop(OUT_ENV, None)
        else:
            os.environ[OUT_ENV] = saved_out
    return 0
