import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from ccsrl.env import CCSEnv, EnvConfig
from ccsrl.metrics import read_metrics
from ccsrl.reservoir import GeologyConfig, GridGeometry, generate_realization
from ccsrl.sac import SACHyperparams
from ccsrl.variants import (
    REGIME_CONFIGS, CurriculumSchedule, DistillConfig, MFConfig, TeacherStudentAgent,
    batch_to_torch, build_agent, distill_weight, evaluate_policy, infonce_loss, mask_spatial,
    teacher_student_actor_losses, teacher_student_critic_losses, train_model_free,
)

GRID = GridGeometry(8, 6, 3, 600.0, 600.0, 15.0)


@pytest.fixture(scope="module")
def reals():
    return [generate_realization(GRID, k, GeologyConfig(correlation_length=1.5)) for k in range(2)]


def test_mask_exact_count():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.normal(size=(2, 3, 8, 6)) * (rng.uniform(size=(2, 3, 8, 6)) < 0.7)
        p = rng.uniform()
        out = mask_spatial(x, p, rng)
        nnz = np.count_nonzero(x)
        assert np.count_nonzero(out) == nnz - math.floor(p * nnz)
        kept = out != 0
        assert np.array_equal(out[kept], x[kept])
    with pytest.raises(ValueError):
        mask_spatial(x, 1.5, rng)


def test_curriculum_boundaries():
    c = CurriculumSchedule()
    assert [e for e in range(30) if c.is_boundary(e)] == [0, 6, 12, 18, 24]
    assert [c.stage(e) for e in (0, 5, 6, 17, 29, 40)] == [0.0, 0.0, 0.25, 0.5, 1.0, 1.0]
    with pytest.raises(ValueError):
        CurriculumSchedule(stages=(0.5, 0.25))


def test_distill_weight_ramp():
    assert distill_weight(1) == 0.0 and distill_weight(22) == 0.0
    assert distill_weight(26) == pytest.approx(0.05)
    assert distill_weight(30) == pytest.approx(0.1) and distill_weight(31) == pytest.approx(0.1)


def _brute_infonce(q, k, tau):
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    k = k / np.linalg.norm(k, axis=1, keepdims=True)
    total = 0.0
    for i in range(len(q)):
        s = [float(q[i] @ k[j]) / tau for j in range(len(k))]
        total += -(s[i] - math.log(sum(math.exp(v) for v in s)))
    return total / len(q)


def test_infonce_cases():
    ident = nn.Identity()
    z = torch.randn(1, 5)
    assert infonce_loss(z, torch.randn(1, 5), ident, ident, 0.1).item() == pytest.approx(0.0, abs=1e-7)
    tie = torch.ones(4, 5)
    assert infonce_loss(tie, tie, ident, ident, 0.1).item() == pytest.approx(math.log(4), abs=1e-6)
    torch.manual_seed(1)
    ps, pt = nn.Linear(6, 4).double(), nn.Linear(6, 4).double()
    zs, zt = torch.randn(8, 6, dtype=torch.float64), torch.randn(8, 6, dtype=torch.float64)
    with torch.no_grad():
        ref = _brute_infonce(ps(zs).numpy(), pt(zt).numpy(), 0.1)
    assert infonce_loss(zs, zt, ps, pt, 0.1).item() == pytest.approx(ref, abs=1e-6)
    with pytest.raises(ValueError):
        infonce_loss(torch.zeros(0, 6), torch.zeros(0, 6), ident, ident, 0.1)


class _Const(nn.Module):
    def __init__(self, v):
        super().__init__()
        self.v = nn.Parameter(torch.tensor(float(v)))

    def forward(self, obs, a):
        return self.v.expand(a.shape[0])


class _StubActor(nn.Module):
    def forward(self, obs, deterministic=False):
        n = obs[0].shape[0]
        return torch.zeros(n, 11), torch.full((n,), -1.0)


def test_teacher_student_critic_hand_arithmetic():
    batch = {"reward": torch.tensor([1.0, 1.0]), "done": torch.tensor([0.0, 1.0]),
             "action": torch.zeros(2, 11), "well": torch.zeros(2, 1), "next_well": torch.zeros(2, 1),
             "spatial": torch.zeros(2, 1), "next_spatial": torch.zeros(2, 1)}
    out = teacher_student_critic_losses(
        batch, _StubActor(), [_Const(1.0), _Const(1.0)], [_Const(2.0), _Const(3.0)],
        [_Const(2.1), _Const(0.0)], torch.tensor(0.2), 0.5, ("spatial", "well"), ("well",))
    # y = 1 + 0.5 * (min(2, 3) - 0.2 * -1) = 2.1 for the live step, 1 for the terminal one
    assert out["target"].tolist() == pytest.approx([2.1, 1.0])
    assert out["teacher_loss"].item() == pytest.approx(2 * (1.1 ** 2 + 0.0) / 2)
    assert out["student_loss"].item() == pytest.approx((0 + 1.1 ** 2) / 2 + (2.1 ** 2 + 1.0) / 2)


def _ts_batch(agent, n=6):
    torch.manual_seed(3)
    return batch_to_torch({
        "spatial": np.random.default_rng(0).normal(size=(n, 2, 3, 8, 6)).astype(np.float32),
        "next_spatial": np.zeros((n, 2, 3, 8, 6), np.float32),
        "history": np.random.default_rng(1).normal(size=(n, 20, 9, 30)).astype(np.float32),
        "well": np.random.default_rng(2).normal(size=(n, 9, 30)).astype(np.float32),
        "next_well": np.zeros((n, 9, 30), np.float32), "action": np.zeros((n, 11), np.float32),
        "reward": np.ones(n, np.float32), "done": np.zeros(n, np.float32),
        "episode": np.zeros(n), "t": np.zeros(n)})


def _actor_grads(agent, batch, w):
    agent.actor.zero_grad()
    agent.heads.zero_grad()
    agent.teachers.zero_grad()
    torch.manual_seed(7)
    L = teacher_student_actor_losses(batch, agent.actor, agent.teachers, agent.students, agent.heads,
                                     agent.alpha, w, 0.1, 1.0, ("history", "well"))
    L["actor_total"].backward()
    return L, [None if p.grad is None else p.grad.clone() for p in agent.actor.parameters()]


def test_actor_loss_leaves_teacher_spatial_untouched():
    torch.manual_seed(0)
    agent = build_agent("teacher_student")
    batch = _ts_batch(agent)
    _actor_grads(agent, batch, 1.0)
    for p in agent.teachers[0].encoder.spatial.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in agent.heads.p_s.parameters())


def test_zero_weight_is_plain_policy_loss():
    torch.manual_seed(0)
    agent = build_agent("teacher_student")
    batch = _ts_batch(agent)
    L0, g0 = _actor_grads(agent, batch, 0.0)
    assert L0["actor_total"].item() == L0["policy_loss"].item()
    assert L0["nce_loss"].item() > 0
    agent.actor.zero_grad()
    torch.manual_seed(7)
    L = teacher_student_actor_losses(batch, agent.actor, agent.teachers, agent.students, agent.heads,
                                     agent.alpha, 0.0, 0.1, 1.0, ("history", "well"))
    L["policy_loss"].backward()
    for a, p in zip(g0, agent.actor.parameters()):
        assert torch.equal(a, p.grad)


def test_teacher_student_update_runs():
    torch.manual_seed(0)
    agent = build_agent("teacher_student", SACHyperparams(batch_size=6))
    agent.w_dist = 0.05
    before = [p.clone() for p in agent.teachers[0].encoder.spatial.parameters()]
    out = agent.update(_ts_batch(agent))
    assert set(out) >= {"teacher_loss", "student_loss", "nce_loss", "value_loss", "alpha"}
    assert agent.n_updates == 1
    after = list(agent.teachers[0].encoder.spatial.parameters())
    assert any(not torch.equal(a, b) for a, b in zip(before, after))


def test_deployability_flags():
    assert not REGIME_CONFIGS["privileged"].deployable
    for r in ("well_only", "history", "masked_critic", "teacher_student"):
        assert REGIME_CONFIGS[r].deployable
        assert not build_agent(r).actor.encoder.uses_spatial


def test_evaluate_deterministic_and_replayable(reals):
    torch.manual_seed(0)
    agent = build_agent("well_only")
    pol = lambda o, d: agent.act(o, d)
    rec1, rec2 = [], []
    r1 = evaluate_policy(pol, CCSEnv(GRID, reals[:1]), 1, True, ("well",), rec1)
    r2 = evaluate_policy(pol, CCSEnv(GRID, reals[:1]), 1, True, ("well",), rec2)
    assert r1 == r2
    env = CCSEnv(GRID, reals[:1])
    env.reset(0)
    replay = [env.step(a)[1] for a, _ in rec1]
    assert replay == [r for _, r in rec1]


def test_masked_curriculum_resets_and_logs(reals, tmp_path):
    cfg = MFConfig("masked_critic", epochs=4, steps_per_epoch=20, seed=0,
                   hp=SACHyperparams(batch_size=8, warmup_steps=10),
                   curriculum=CurriculumSchedule(stages=(0.0, 0.5, 1.0), epochs_per_stage=1))
    s = train_model_free(cfg, CCSEnv(GRID, reals), CCSEnv(GRID, reals[:1]), tmp_path)
    assert s["reset_epochs"] == [0, 1, 2] and s["buffer"].n_resets == 3
    assert len(s["returns"]) == 4 and s["real_steps"] == 80
    header, recs = read_metrics(tmp_path / "metrics.jsonl")
    assert header["schema"] == "ccsrl.metrics/1" and len(recs) == 4
    assert all("seconds" not in r for r in recs)
    assert np.count_nonzero(s["buffer"].contents()["spatial"]) == 0  # last stage masks everything
    assert (tmp_path / "checkpoint.json").exists()


def test_training_is_seed_deterministic(reals, tmp_path):
    cfg = MFConfig("teacher_student", epochs=2, steps_per_epoch=20, seed=4,
                   hp=SACHyperparams(batch_size=8, warmup_steps=10),
                   distill=DistillConfig(e0=1, e1=2))
    runs = [train_model_free(cfg, CCSEnv(GRID, reals, seed=1), CCSEnv(GRID, reals[:1]),
                             tmp_path / str(k)) for k in range(2)]
    assert runs[0]["returns"] == runs[1]["returns"]
    a = (tmp_path / "0" / "metrics.jsonl").read_text()
    assert a == (tmp_path / "1" / "metrics.jsonl").read_text()
    assert (tmp_path / "0" / "checkpoint_preft.json").exists()
