"""Acceptance criteria 1-12. Each test records one pass/fail line (see conftest.py).

The desk-scale study behind criteria 2, 7, 10 and 11 is built once per session:
a shared nominal teacher-student controller and GRU world model (seed 0), plus
per-seed well-only and history-conditioned controllers and Scenario-1 retuning
runs for seeds 0-2, all on one fixed target realization. Set CCSRL_ACCEPT_DIR
to keep the run tree; completed runs found there are reused.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from ccsrl.env import CCSEnv, EnvConfig, ObservationBundle
from ccsrl.harness import (
    RunConfig, budget_plan, load_nominal, main, plan_totals, pretrain_wm, retune, train_mb, train_mf,
)
from ccsrl.latent import (
    PAPER_NOMINAL, PAPER_RETUNE, DynaBudget, DynaRunner, EncodedEnv, ImaginationConfig, LatentActor,
    LatentCritic, LatentStore, LinearGaussianLatentEnv, lambda_returns, retention_metric,
)
from ccsrl.metrics import best_final, read_metrics
from ccsrl.nets import GRUGate, GatedTransformerBlock, WellEncoder, squashed_log_prob
from ccsrl.reservoir import GeologyConfig, GridGeometry, generate_realization, mass_balance_report
from ccsrl.sac import SACHyperparams, critic_td_target
from ccsrl.scenarios import ComparisonReport, RunResult, collect_abnormal_transitions, final_gain
from ccsrl.variants import (
    CurriculumSchedule, MFConfig, distill_weight, infonce_loss, mask_spatial, train_model_free,
)
from ccsrl.world_models import (
    KoopmanWM, LatentDataset, WMConfig, WMTrainer, adapter_errors, ensemble_predictions,
    fit_residual_adapter, gaussian_nll, pretrain_ensemble,
)

pytestmark = pytest.mark.acceptance
SEEDS = (0, 1, 2)
GEOLOGY_SEED = 0


# -- shared desk-scale study ---------------------------------------------------------------

def _cfg(seed: int) -> RunConfig:
    return RunConfig(experiment="acceptance", seed=seed, geology_seed=GEOLOGY_SEED, nominal_seed=0)


def _done(run_dir: Path, epochs: int) -> bool:
    p = run_dir / "metrics.jsonl"
    if not p.exists():
        return False
    try:
        _, recs = read_metrics(p)
    except ValueError:
        return False
    return bool(recs) and recs[-1]["epoch"] == epochs


@pytest.fixture(scope="session")
def study(tmp_path_factory):
    out = os.environ.get("CCSRL_ACCEPT_DIR") or str(tmp_path_factory.mktemp("acceptance"))
    os.environ["CCSRL_OUT"] = out
    t0 = time.perf_counter()
    c0 = _cfg(0)
    plan = c0.plan
    ts = c0.seed_dir / "mf" / "teacher_student"
    if not (_done(ts, plan.mf["teacher_student"][0]) and (ts / "latent_postft.bin").exists()):
        train_mf(c0, "teacher_student")
    if not (c0.seed_dir / "wm" / "gru_postft" / "ensemble.pt").exists():
        pretrain_wm(c0, "gru", "postft")
    timings = {"nominal": time.perf_counter() - t0}
    for k in SEEDS:
        c = _cfg(k)
        for regime in ("well_only", "history"):
            t = time.perf_counter()
            if not _done(c.seed_dir / "mf" / regime, plan.mf[regime][0]):
                train_mf(c, regime)
            timings[f"{regime}/{k}"] = time.perf_counter() - t
        for fam in ("mb", "mf"):
            t = time.perf_counter()
            d = c.seed_dir / "retune" / "s1" / ("mf" if fam == "mf" else "mb_gru_postft")
            if not _done(d, plan.retune.epochs):
                retune(c, 1, fam, "gru", "postft")
            timings[f"retune_{fam}/{k}"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    return {"root": Path(out), "timings": timings}


# -- 1. conservation -----------------------------------------------------------------------------

def test_c01_conservation(criterion):
    grid = GridGeometry(8, 6, 3, 600.0, 600.0, 15.0)
    reals = [generate_realization(grid, 100 + k, GeologyConfig()) for k in range(4)]
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst, episodes, failures = 0.0, 0, 0
    for scenario in range(4):
        env = CCSEnv(grid, reals, EnvConfig(scenario_id=scenario), seed=scenario)
        for _ in range(250):
            env.reset()
            while not env.done:
                env.step(rng.uniform(-1, 1, 11))
                worst = max(worst, mass_balance_report(env.state))
            episodes += 1
        failures += env.failures
    dt = time.perf_counter() - t0
    ok = criterion(1, worst <= 1e-8 and episodes == 1000 and dt < 300,
                   f"{episodes} episodes over scenarios 0-3, max relative mass-balance residual {worst:.2e} "
                   f"(limit 1e-8), {failures} simulator failures, {dt:.0f} s (limit 300 s)")
    assert ok


# -- 2. determinism --------------------------------------------------------------------------------

def test_c02_determinism(study, criterion):
    """Identical seeds give byte-identical metrics logs (first copy of the well-only log comes from the study)."""
    c0 = _cfg(0)

    def timed(fn, log):
        t = time.perf_counter()
        fn()
        return log.read_bytes(), time.perf_counter() - t

    mf_log = c0.seed_dir / "mf" / "well_only" / "metrics.jsonl"
    mb_log = c0.seed_dir / "mb" / "gru_postft" / "metrics.jsonl"
    mf_first = mf_log.read_bytes()
    mf_again, mf_secs = timed(lambda: train_mf(c0, "well_only"), mf_log)
    mb_first, mb_secs1 = timed(lambda: train_mb(c0, "gru", "postft"), mb_log)
    mb_again, mb_secs2 = timed(lambda: train_mb(c0, "gru", "postft"), mb_log)
    res = {"model-free well-only": (mf_first == mf_again, mf_secs),
           "model-based GRU nominal": (mb_first == mb_again, max(mb_secs1, mb_secs2))}
    ok = all(same and secs < 600 for same, secs in res.values())
    criterion(2, ok, "; ".join(f"{n}: logs {'byte-identical' if same else 'DIFFER'}, {secs / 60:.1f} min per run"
                               for n, (same, secs) in res.items()))
    assert ok


# -- 3. loss oracles ---------------------------------------------------------------------------------

def _infonce_brute(zs, zt, Ws, Wt, tau):
    q = [[sum(Ws[j][i] * z[i] for i in range(len(z))) for j in range(len(Ws))] for z in zs]
    k = [[sum(Wt[j][i] * z[i] for i in range(len(z))) for j in range(len(Wt))] for z in zt]
    nrm = lambda v: [x / math.sqrt(sum(y * y for y in v)) for x in v]
    q, k = [nrm(v) for v in q], [nrm(v) for v in k]
    loss = 0.0
    for i in range(len(q)):
        logits = [sum(a * b for a, b in zip(q[i], k[j])) / tau for j in range(len(k))]
        m = max(logits)
        loss += -(logits[i] - (m + math.log(sum(math.exp(x - m) for x in logits))))
    return loss / len(q)


def test_c03_loss_oracles(criterion):
    torch.manual_seed(0)
    errs = {}
    r, d = torch.randn(64, dtype=torch.float64), (torch.rand(64) < 0.3).double()
    q1, q2, lp = (torch.randn(64, dtype=torch.float64) for _ in range(3))
    got = critic_td_target(r, d, q1, q2, lp, 0.2, 0.99)
    ref = [r[i].item() + (1 - d[i].item()) * 0.99 * (min(q1[i].item(), q2[i].item()) - 0.2 * lp[i].item())
           for i in range(64)]
    errs["td_target"] = max(abs(g - e) for g, e in zip(got.tolist(), ref))

    for B in (1, 4, 8):
        ps, pt = torch.nn.Linear(6, 5, bias=False).double(), torch.nn.Linear(6, 5, bias=False).double()
        zs, zt = torch.randn(B, 6, dtype=torch.float64), torch.randn(B, 6, dtype=torch.float64)
        got = infonce_loss(zs, zt, ps, pt, 0.1).item()
        ref = _infonce_brute(zs.tolist(), zt.tolist(), ps.weight.tolist(), pt.weight.tolist(), 0.1)
        errs[f"infonce_B{B}"] = abs(got - ref)

    H, gamma, lam = 7, 0.97, 0.8
    rw, v = torch.randn(H, 3, dtype=torch.float64), torch.randn(H + 1, 3, dtype=torch.float64)
    got = lambda_returns(rw, v, gamma, lam)
    worst = 0.0
    for t in range(H):
        N = H - t
        nstep = lambda n: sum(gamma ** i * rw[t + i] for i in range(n)) + gamma ** n * v[t + n]
        ref = (1 - lam) * sum(lam ** (n - 1) * nstep(n) for n in range(1, N)) + lam ** (N - 1) * nstep(N)
        worst = max(worst, (got[t] - ref).abs().max().item())
    errs["lambda_returns"] = worst

    x, mu = torch.randn(10, 4, dtype=torch.float64), torch.randn(10, 4, dtype=torch.float64)
    sd = torch.rand(10, 4, dtype=torch.float64) + 0.1
    ref = -stats.norm.logpdf(x.numpy(), mu.numpy(), sd.numpy()).sum(-1)
    errs["gaussian_nll"] = float(np.abs(gaussian_nll(x, mu, sd).numpy() - ref).max())

    hand = {1: 0.0, 22: 0.0, 23: 0.0125, 26: 0.05, 29: 0.0875, 30: 0.1, 31: 0.1}
    errs["distill_weight"] = max(abs(distill_weight(e) - w) for e, w in hand.items())
    worst_name = max(errs, key=errs.get)
    ok = criterion(3, max(errs.values()) <= 1e-6,
                   f"{len(errs)} oracle comparisons, max abs error {errs[worst_name]:.1e} ({worst_name}), limit 1e-6")
    assert ok


# -- 4. gradient checks --------------------------------------------------------------------------------

def _fd_rel_error(fn, tensors, n_coords=25, eps=1e-6, seed=0):
    """Central finite differences on random coordinates of each tensor vs autograd."""
    g = torch.Generator().manual_seed(seed)
    out = fn()
    W = torch.randn(out.shape, generator=g, dtype=torch.float64)
    grads = torch.autograd.grad((out * W).sum(), tensors)
    worst = 0.0
    for t, ga in zip(tensors, grads):
        flat = t.data.view(-1)
        idx = torch.randperm(flat.numel(), generator=g)[:n_coords]
        fd, an = [], []
        for i in idx.tolist():
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = (fn() * W).sum().item()
                flat[i] = old - eps
                dn = (fn() * W).sum().item()
                flat[i] = old
            fd.append((up - dn) / (2 * eps))
            an.append(ga.reshape(-1)[i].item())
        fd, an = np.array(fd), np.array(an)
        worst = max(worst, np.linalg.norm(fd - an) / max(np.linalg.norm(fd), 1e-12))
    return worst


def test_c04_gradient_checks(criterion):
    torch.manual_seed(0)
    errs = {}
    enc = WellEncoder(8).double()
    y = torch.randn(3, 9, 30, dtype=torch.float64, requires_grad=True)
    errs["well_encoder"] = _fd_rel_error(lambda: enc(y), [y] + list(enc.parameters()))
    gate = GRUGate(6).double()
    x, h = (torch.randn(4, 6, dtype=torch.float64, requires_grad=True) for _ in range(2))
    errs["gru_gate"] = _fd_rel_error(lambda: gate(x, h), [x, h] + list(gate.parameters()))
    blk = GatedTransformerBlock(8, 2, 16).double()
    e = torch.randn(2, 5, 8, dtype=torch.float64, requires_grad=True)
    errs["gated_transformer"] = _fd_rel_error(lambda: blk(e), [e] + list(blk.parameters()))
    u, m = (torch.randn(5, 11, dtype=torch.float64, requires_grad=True) for _ in range(2))
    ls = (0.3 * torch.randn(5, 11, dtype=torch.float64)).requires_grad_(True)
    errs["policy_log_prob"] = _fd_rel_error(lambda: squashed_log_prob(u, m, ls), [u, m, ls])
    worst = max(errs, key=errs.get)
    ok = criterion(4, errs[worst] <= 1e-4,
                   ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (max relative error, limit 1e-4)")
    assert ok


# -- 5. masking operator and curriculum resets -------------------------------------------------------

def test_c05_masking_and_curriculum(criterion):
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=4))
        x = rng.normal(size=shape) * (rng.uniform(size=shape) < rng.uniform(0.2, 1.0))
        nnz = np.count_nonzero(x)
        p = rng.uniform()
        out = mask_spatial(x, p, rng)
        bad += np.count_nonzero(out) != nnz - math.floor(p * nnz)
        bad += not np.array_equal(out[out != 0], x[out != 0])
        bad += not np.array_equal(mask_spatial(x, 0.0, rng), x)
        bad += np.count_nonzero(mask_spatial(x, 1.0, rng)) != 0
    grid = GridGeometry(8, 6, 3, 600.0, 600.0, 15.0)
    reals = [generate_realization(grid, 7, GeologyConfig())]
    cfg = MFConfig("masked_critic", epochs=30, steps_per_epoch=2, seed=0,
                   hp=SACHyperparams(warmup_steps=10 ** 9))
    s = train_model_free(cfg, CCSEnv(grid, reals), CCSEnv(grid, reals))
    sched = CurriculumSchedule()
    expect = [e for e in range(30) if sched.is_boundary(e)]
    ok = criterion(5, bad == 0 and s["reset_epochs"] == [0, 6, 12, 18, 24] == expect
                   and s["buffer"].n_resets == 5,
                   f"100 random tensors: {bad} property violations; buffer resets at epochs {s['reset_epochs']} "
                   f"({s['buffer'].n_resets} resets over 30 epochs, expected 5 at stage boundaries)")
    assert ok


# -- 6. Koopman identifiability -------------------------------------------------------------------------

def test_c06_koopman_identifiability(criterion):
    t0 = time.perf_counter()
    D, M = 8, 11
    rng = np.random.default_rng(0)
    A0 = 0.9 * np.linalg.qr(rng.normal(size=(D, D)))[0]
    B0 = 0.3 * rng.normal(size=(D, M))
    rows = []
    for e in range(60):
        z = rng.normal(size=D)
        for t in range(10):
            a = rng.uniform(-1, 1, M)
            zn = A0 @ z + B0 @ a
            rows.append((z, a, 0.0, zn, t == 9, e, t))
            z = zn
    c = list(zip(*rows))
    f = lambda k, dt=np.float32: np.array(c[k], dtype=dt)
    ds = LatentDataset(f(0), f(1), f(2), f(3), f(4), f(5, np.int64), f(6, np.int64))
    m = KoopmanWM(WMConfig(latent_dim=D, act_dim=M, hidden=32, residual_scale=0.0))
    m.warm_start(ds.z, ds.a, ds.z_next)
    WMTrainer(m, lr=1e-4, batch=64).fit(ds, 50)
    ea = np.abs(m.A.detach().numpy() - A0).max()
    eb = np.abs(m.B.detach().numpy() - B0).max()
    with torch.no_grad():
        pred = m.linear(torch.as_tensor(ds.z), torch.as_tensor(ds.a)).numpy()
    rel = ((pred - ds.z_next) ** 2).sum(-1).mean() / (ds.z_next ** 2).sum(-1).mean()
    dt = time.perf_counter() - t0
    # noise-free data: the one-step floor is float32 round-off relative to the signal
    ok = criterion(6, ea <= 1e-3 and eb <= 1e-3 and rel < 1e-6 and dt < 60,
                   f"max |A-A0| {ea:.1e}, max |B-B0| {eb:.1e} (limit 1e-3); relative one-step MSE {rel:.1e} "
                   f"(float32 floor, limit 1e-6); {dt:.1f} s")
    assert ok


# -- 7. residual adapter on abnormal tuples ----------------------------------------------------------------

def test_c07_residual_adapter(study, criterion):
    t0 = time.perf_counter()
    c0 = _cfg(0)
    nominal = load_nominal(c0, "gru", "postft")
    from ccsrl.harness import geology
    grid, _, target = geology(c0)
    pairs = []
    for scenario in (2, 3):
        for seed in SEEDS:
            env = EncodedEnv(CCSEnv(grid, [target], EnvConfig(scenario_id=scenario), seed=seed),
                             nominal.encoder, nominal.encoder_hash)
            ds = collect_abnormal_transitions(env, LatentActor.from_head(nominal.head), 160,
                                              nominal.encoder_hash, seed=seed)
            train, held = ds.split_by_episode(0.25, seed)
            adapter, _ = fit_residual_adapter(train, nominal.ensemble, steps=500, seed=seed)
            pz, pr = ensemble_predictions(nominal.ensemble, held)
            e = adapter_errors(adapter, held, pz, pr)
            pairs.append((scenario, seed, e))
    lat = all(e["corrected_latent"] < e["nominal_latent"] for *_, e in pairs)
    rew = all(e["corrected_reward"] < e["nominal_reward"] for *_, e in pairs)
    dt = time.perf_counter() - t0
    detail = "; ".join(f"S{s}/seed{k}: latent {e['nominal_latent']:.3g}->{e['corrected_latent']:.3g}, "
                       f"reward {e['nominal_reward']:.3g}->{e['corrected_reward']:.3g}" for s, k, e in pairs)
    ok = criterion(7, lat and rew and dt < 900, f"held-out one-step MSE nominal->corrected: {detail}; {dt:.0f} s")
    assert ok


# -- 8. budget exactness ----------------------------------------------------------------------------------

class _CountingEnv:
    """Minimal stand-in with the environment interface; counts steps, no physics."""

    def __init__(self, horizon=20):
        self.cfg = EnvConfig(horizon=horizon)
        self.realizations = [None]
        self.real_steps, self.episodes, self.t, self.done = 0, 0, 0, True
        self.last_action = None
        self._obs = ObservationBundle(np.ones((2, 1, 2, 2), np.float32), np.zeros((9, 30), np.float32),
                                      np.zeros((self.cfg.history_len, 9, 30), np.float32), 0)

    def reset(self, index=None):
        self.t, self.done = 0, False
        self.episodes += 1
        return self._obs

    def step(self, a):
        self.last_action = np.asarray(a, dtype=float)
        self.real_steps += 1
        self.t += 1
        self.done = self.t >= self.cfg.horizon
        return self._obs, 0.0, self.done, None


class _IdleAgent:
    def act(self, obs, deterministic=False):
        return np.zeros(11)

    def update(self, batch):
        return {}


def _synthetic(D=4, M=2):
    rng = np.random.default_rng(0)
    A = 0.8 * np.linalg.qr(rng.normal(size=(D, D)))[0]
    B = 0.5 * rng.normal(size=(D, M))
    z_star = np.linalg.solve(np.eye(D) - A, B @ np.array([0.5, -0.3]))
    mk = lambda s: LinearGaussianLatentEnv(A, B, z_star, sigma=0.01, w=2.0, seed=s)
    store, env = LatentStore(), mk(2)
    for _ in range(20):
        z = env.reset()
        while not env.done:
            a = rng.uniform(-1, 1, M)
            zn, r, done = env.step(a)
            store.add(z, a, r, zn, done, env.episodes, env.t - 1)
            z = zn
    return mk, store.dataset(), D, M


def test_c08_budget_exactness(criterion, capsys):
    plan = budget_plan(True)
    totals = plan_totals(plan)
    expect = {"mf": {"privileged": 180000, "well_only": 180000, "history": 90000, "masked_critic": 90000,
                     "teacher_student": 90000},
              "scenario0": {"real": 4000, "imagined": 80000, "imagined_per_epoch": 4000},
              "retune_mb": {"real": 800, "imagined": 64000, "imagined_per_epoch": 3200},
              "retune_mf": {"real": 800}}
    plan_ok = totals == expect
    assert main(["train-mf", "--regime", "well_only", "--paper-budget", "--dry-run"]) == 0
    import json
    cli_ok = json.loads(capsys.readouterr().out) == expect

    # executed counters: the model-free loop on a physics-free stand-in environment
    executed = {}
    for regime, (epochs, steps) in plan.mf.items():
        env = _CountingEnv()
        cfg = MFConfig(regime, epochs, steps, hp=SACHyperparams(warmup_steps=10 ** 9), buffer_capacity=64)
        s = train_model_free(cfg, env, _CountingEnv(), agent=_IdleAgent())
        executed[regime] = (s["real_steps"], env.real_steps)
    mf_ok = all(a == b == expect["mf"][r] for r, (a, b) in executed.items())
    e, spe = plan.mf_retune
    mf_retune_ok = e * spe == 800

    # executed counters: the Dyna loop at full budgets on the synthetic latent environment
    mk, offline, D, M = _synthetic()
    wcfg = WMConfig(latent_dim=D, act_dim=M, hidden=32)
    dyna = {}
    for name, budget in (("scenario0", PAPER_NOMINAL), ("retune_mb", PAPER_RETUNE)):
        ens, _ = pretrain_ensemble(offline, "koopman", k=3, steps=50, cfg=wcfg, seed=0)
        tr = mk(3)
        run = DynaRunner(tr, mk(4), LatentActor(D, M, 32), LatentCritic(D, 32), ens, offline, budget,
                         ImaginationConfig(batch=400, wm_steps=5, critic_warmup_steps=0), seed=0)
        out = run.run()
        dyna[name] = (out["counters"]["real"], tr.real_steps, out["counters"]["imagined"])
    dyna_ok = dyna["scenario0"] == (4000, 4000, 80000) and dyna["retune_mb"] == (800, 800, 64000)
    ok = criterion(8, plan_ok and cli_ok and mf_ok and mf_retune_ok and dyna_ok,
                   f"plan {'matches' if plan_ok and cli_ok else 'DIFFERS'}; executed model-free real steps "
                   + ", ".join(f"{r} {a}" for r, (a, _) in executed.items())
                   + f"; Dyna scenario 0 real/imagined {dyna['scenario0'][0]}/{dyna['scenario0'][2]}, "
                   f"retuning {dyna['retune_mb'][0]}/{dyna['retune_mb'][2]}, model-free retuning {e * spe}")
    assert ok


# -- 9. metric arithmetic fixtures ----------------------------------------------------------------------------

def test_c09_metric_fixtures(criterion):
    ref = 19.616  # teacher-student final return
    retention_rows = [(19.604, 99.9), (19.586, 99.8), (19.573, 99.8), (19.518, 99.5),
              (18.786, 95.8), (18.487, 94.2), (18.379, 93.7), (17.213, 87.7)]
    ret_ok = all(retention_metric(f, ref) == r for f, r in retention_rows)
    gain_rows = [((17.682, 11.573), 6.109), ((10.563, -5.584), 16.147), ((14.414, 12.514), 1.900)]
    gain_ok = all(final_gain(*args) == g for args, g in gain_rows)
    rep = ComparisonReport(1, [RunResult("MB GRU Post-FT", "Model-based", [17.0, 17.725, 17.682]),
                               RunResult("MF retuning", "Model-free", [12.0, 14.645, 11.573])])
    row_ok = rep.summary_row()[-1] == "+6.109"
    ok = criterion(9, ret_ok and gain_ok and row_ok,
                   f"retention reproduces {sum(retention_metric(f, ref) == r for f, r in retention_rows)}/8 rows; "
                   f"final gain reproduces {sum(final_gain(*a) == g for a, g in gain_rows)}/3 rows")
    assert ok


# -- 10. scenario-1 audit --------------------------------------------------------------------------------

def test_c10_scenario1_audit(study, criterion):
    c = _cfg(0)
    mb = retune(c, 1, "mb", "gru", "postft", record_actions=True)
    mf = retune(c, 1, "mf")
    runner = mb["runner"]
    real = np.array(runner.real_actions)
    imag = np.concatenate(runner.imagined_actions)
    mf_actions = mf["buffer"].contents()["action"]
    calls = []
    for env in (mb["env"], mb["eval_env"], mf["env"], mf["eval_env"]):
        calls += [c_[10] == env.q_min[10] for c_ in env.simulator_calls()]
    ok = criterion(10, bool(np.all(real[:, 10] == -1) and np.all(imag[:, 10] == -1)
                            and np.all(mf_actions[:, 10] == -1) and all(calls) and len(calls) > 0),
                   f"{len(real)} real and {len(imag)} imagined model-based actions, {len(mf_actions)} model-free "
                   f"actions with component 10 = -1; {sum(calls)}/{len(calls)} simulator calls with I3 at q_min")
    assert ok


# -- 11. qualitative trend -----------------------------------------------------------------------------

def test_c11_qualitative_trend(study, criterion):
    rows = []
    for k in SEEDS:
        sd = _cfg(k).seed_dir
        fin = lambda p: best_final(read_metrics(p / "metrics.jsonl")[1])[1]
        rows.append({"seed": k, "well_only": fin(sd / "mf" / "well_only"), "history": fin(sd / "mf" / "history"),
                     "mb": fin(sd / "retune" / "s1" / "mb_gru_postft"), "mf": fin(sd / "retune" / "s1" / "mf")})
    obs = sum(r["well_only"] <= r["history"] for r in rows)
    s1 = sum(r["mb"] >= r["mf"] for r in rows)
    med = {key: float(np.median([r[key] for r in rows])) for key in ("well_only", "history", "mb", "mf")}
    minutes = study["timings"]["total"] / 60
    detail = (f"well-only <= history in {obs}/3 seeds (medians {med['well_only']:.3f} vs {med['history']:.3f}); "
              f"S1 MB >= MF retuning in {s1}/3 seeds (medians {med['mb']:.3f} vs {med['mf']:.3f}); "
              + "; ".join(f"seed {r['seed']}: WO {r['well_only']:.3f} H {r['history']:.3f} "
                          f"MB {r['mb']:.3f} MF {r['mf']:.3f}" for r in rows)
              + f"; study wall time {minutes:.0f} min")
    ok = criterion(11, obs >= 2 and s1 >= 2 and minutes < 120, detail)
    assert ok


# -- 12. latent-control sanity ------------------------------------------------------------------------------

def test_c12_latent_control(criterion):
    t0 = time.perf_counter()
    mk, offline, D, M = _synthetic()
    oracle, a_star = mk(1).grid_oracle(41)
    ens, _ = pretrain_ensemble(offline, "koopman", k=3, steps=500,
                               cfg=WMConfig(latent_dim=D, act_dim=M, hidden=64), seed=0)
    run = DynaRunner(mk(3), mk(4), LatentActor(D, M, 64), LatentCritic(D, 64), ens, offline,
                     DynaBudget(50, 20, 2000),
                     ImaginationConfig(horizon=10, batch=50, lr_actor=1e-3, lr_critic=1e-3), seed=0)
    out = run.run()
    hit = next((i + 1 for i, r in enumerate(out["returns"]) if r >= 0.95 * oracle), None)
    dt = time.perf_counter() - t0
    ok = criterion(12, oracle > 0 and out["final"] >= 0.95 * oracle and dt < 600,
                   f"constant-action oracle {oracle:.3f} at a={np.round(a_star, 2).tolist()}; latent actor final "
                   f"{out['final']:.3f} ({100 * out['final'] / oracle:.1f}%), first >= 95% at epoch {hit}; {dt:.0f} s")
    assert ok
