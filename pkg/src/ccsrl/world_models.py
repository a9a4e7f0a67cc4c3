"""Latent world models over (z_t, a_t) -> (z_{t+1}, r_t): GRU, GeoGRU, RSSM, Koopman.

Every backbone exposes the same stepping interface so imagination code does
not care which one it drives:

    state = model.initial_state(batch)
    mean, std, reward, state = model.step(state, z, a)

``std`` is None for deterministic backbones. Recurrent models are trained on
fixed-length windows cut from contiguous episode segments; Koopman on
one-step tuples.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import mlp

log = logging.getLogger(__name__)

LATENT_DIM = 128
ACT_DIM = 11
BACKBONES = ("gru", "geogru", "rssm", "koopman")
_MAGIC = b"CCSLAT01"


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


# -- datasets ------------------------------------------------------------------------

@dataclass
class LatentDataset:
    """Latent transition tuples plus episode bookkeeping (and optional coarse fields)."""
    z: np.ndarray
    a: np.ndarray
    r: np.ndarray
    z_next: np.ndarray
    done: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    field: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.z)
        for name in ("a", "r", "z_next", "done", "episode", "t"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name!r} has {len(getattr(self, name))} rows, expected {n}")
        if not (np.isfinite(self.z).all() and np.isfinite(self.z_next).all()):
            raise ValueError("latent transitions must be finite")

    def __len__(self):
        return len(self.z)

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def subset(self, idx) -> "LatentDataset":
        idx = np.asarray(idx, dtype=np.int64)
        f = None if self.field is None else self.field[idx]
        return LatentDataset(self.z[idx], self.a[idx], self.r[idx], self.z_next[idx], self.done[idx],
                             self.episode[idx], self.t[idx], f)

    @staticmethod
    def concat(parts: list["LatentDataset"]) -> "LatentDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        # keep episode ids distinct across parts
        eps, off = [], 0
        for p in parts:
            eps.append(p.episode + off)
            off += int(p.episode.max()) + 1
        f = None if any(p.field is None for p in parts) else np.concatenate([p.field for p in parts])
        cat = lambda k: np.concatenate([getattr(p, k) for p in parts])
        return LatentDataset(cat("z"), cat("a"), cat("r"), cat("z_next"), cat("done"),
                             np.concatenate(eps), cat("t"), f)

    def split_by_episode(self, holdout: float, seed: int = 0) -> tuple["LatentDataset", "LatentDataset"]:
        eps = np.unique(self.episode)
        rng = np.random.default_rng(seed)
        rng.shuffle(eps)
        n_hold = max(1, int(round(holdout * len(eps)))) if len(eps) > 1 else 0
        hold = np.isin(self.episode, eps[:n_hold])
        return self.subset(np.flatnonzero(~hold)), self.subset(np.flatnonzero(hold))

    def windows(self, length: int) -> np.ndarray:
        """Start-aligned index windows (n, length) of consecutive steps within an episode."""
        out = []
        order = np.lexsort((self.t, self.episode))
        ep, t = self.episode[order], self.t[order]
        start = 0
        for k in range(1, len(order) + 1):
            if k == len(order) or ep[k] != ep[k - 1] or t[k] != t[k - 1] + 1:
                seg = order[start:k]
                for s in range(len(seg) - length + 1):
                    out.append(seg[s:s + length])
                start = k
        return np.array(out, dtype=np.int64).reshape(-1, length)

    def segments(self) -> list[np.ndarray]:
        """Maximal runs of consecutive steps, as index arrays in time order."""
        order = np.lexsort((self.t, self.episode))
        ep, t = self.episode[order], self.t[order]
        cuts = np.flatnonzero((ep[1:] != ep[:-1]) | (t[1:] != t[:-1] + 1)) + 1
        return [s for s in np.split(order, cuts) if len(s)]

    # binary format: magic, uint32 d, act_dim, count, field_dim; then float32 blocks
    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n, d = self.z.shape
        fd = 0 if self.field is None else self.field.shape[1]
        with path.open("wb") as fh:
            fh.write(_MAGIC + struct.pack("<4I", d, self.a.shape[1], n, fd))
            for arr in (self.z, self.a, self.r, self.z_next, self.done, self.episode, self.t):
                fh.write(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
            if fd:
                fh.write(np.ascontiguousarray(self.field, dtype=np.float32).tobytes())

    @classmethod
    def load(cls, path: Path) -> "LatentDataset":
        raw = Path(path).read_bytes()
        if raw[:8] != _MAGIC:
            raise ValueError(f"{path}: not a latent dataset")
        d, ad, n, fd = struct.unpack("<4I", raw[8:24])
        buf = np.frombuffer(raw, dtype=np.float32, offset=24)
        sizes = [n * d, n * ad, n, n * d, n, n, n, n * fd]
        if buf.size != sum(sizes):
            raise ValueError(f"{path}: truncated or corrupt payload")
        parts = np.split(buf, np.cumsum(sizes)[:-1])
        z, a, r, zn, done, ep, t, f = parts
        return cls(z.reshape(n, d).copy(), a.reshape(n, ad).copy(), r.copy(), zn.reshape(n, d).copy(),
                   done.copy(), ep.astype(np.int64), t.astype(np.int64),
                   f.reshape(n, fd).copy() if fd else None)


def coarse_field(spatial: np.ndarray, out_hw: tuple[int, int] = (4, 4)) -> np.ndarray:
    """Layer-averaged, pooled spatial channels, flattened: (..., 2, nz, nx, ny) -> (..., 2*h*w)."""
    x = torch.as_tensor(np.asarray(spatial, dtype=np.float32))
    lead = x.shape[:-4]
    x = x.reshape(-1, *x.shape[-4:]).mean(dim=2)
    return F.adaptive_avg_pool2d(x, out_hw).reshape(*lead, -1).numpy()


@torch.no_grad()
def encode_transitions(encoder: nn.Module, contents: dict, batch: int = 256,
                       with_field: bool = False) -> LatentDataset:
    """Encode replay-buffer contents (history, well, next_well, ...) with a frozen public encoder."""
    if "history" not in contents:
        raise ValueError("encoding needs history-conditioned transitions")
    H = torch.as_tensor(contents["history"], dtype=torch.float32)
    y = torch.as_tensor(contents["well"], dtype=torch.float32)
    y2 = torch.as_tensor(contents["next_well"], dtype=torch.float32)
    H2 = torch.cat([H[:, 1:], y2[:, None]], dim=1)
    z, zn = [], []
    for s in range(0, len(y), batch):
        z.append(encoder(H[s:s + batch], y[s:s + batch]))
        zn.append(encoder(H2[s:s + batch], y2[s:s + batch]))
    field = None
    if with_field:
        if "next_spatial" not in contents:
            raise ValueError("coarse fields need stored spatial observations")
        field = coarse_field(contents["next_spatial"])
    return LatentDataset(torch.cat(z).numpy(), np.asarray(contents["action"], np.float32),
                         np.asarray(contents["reward"], np.float32), torch.cat(zn).numpy(),
                         np.asarray(contents["done"], np.float32),
                         np.asarray(contents["episode"], np.int64), np.asarray(contents["t"], np.int64),
                         field)


# -- losses ------------------------------------------------------------------------

def gaussian_nll(x: torch.Tensor, mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    """Per-sample negative log-likelihood of a diagonal Gaussian, summed over the last dim."""
    return 0.5 * (math.log(2 * math.pi) + 2 * std.log() + ((x - mean) / std) ** 2).sum(-1)


def diag_kl(mu_q, std_q, mu_p, std_p) -> torch.Tensor:
    return (torch.log(std_p / std_q) + (std_q ** 2 + (mu_q - mu_p) ** 2) / (2 * std_p ** 2) - 0.5).sum(-1)


def balanced_kl(mu_q, std_q, mu_p, std_p, balance: float = 0.8) -> torch.Tensor:
    """balance * KL(sg(q) || p) + (1 - balance) * KL(q || sg(p))."""
    prior_side = diag_kl(mu_q.detach(), std_q.detach(), mu_p, std_p)
    post_side = diag_kl(mu_q, std_q, mu_p.detach(), std_p.detach())
    return balance * prior_side + (1 - balance) * post_side


def _std(raw: torch.Tensor, floor: float) -> torch.Tensor:
    return F.softplus(raw) + floor


# -- backbones ----------------------------------------------------------------------

@dataclass(frozen=True)
class WMConfig:
    latent_dim: int = LATENT_DIM
    act_dim: int = ACT_DIM
    hidden: int = 256
    deter: int = 128
    stoch: int = 32
    std_floor: float = 1e-3
    kl_weight: float = 1.0
    kl_balance: float = 0.8
    geo_weight: float = 1.0
    residual_weight: float = 1e-2
    residual_scale: float = 0.1
    window: int = 10


class GRUWM(nn.Module):
    stochastic = True
    sequential = True

    def __init__(self, cfg: WMConfig = WMConfig()):
        super().__init__()
        self.cfg = cfg
        self.cell = nn.GRUCell(cfg.latent_dim + cfg.act_dim, cfg.deter)
        self.out = mlp(cfg.deter, cfg.hidden, 2 * cfg.latent_dim + 1, layers=1)

    def initial_state(self, n: int):
        return torch.zeros(n, self.cfg.deter)

    def step(self, h, z, a):
        h = self.cell(torch.cat([z, a], -1), h)
        o = self.out(h)
        d = self.cfg.latent_dim
        return o[:, :d], _std(o[:, d:2 * d], self.cfg.std_floor), o[:, -1], h

    def rollout(self, z, a):
        """Teacher-forced predictions over a (B, L, ...) window."""
        h = self.initial_state(z.shape[0])
        means, stds, rs = [], [], []
        for k in range(z.shape[1]):
            m, s, r, h = self.step(h, z[:, k], a[:, k])
            means.append(m)
            stds.append(s)
            rs.append(r)
        return torch.stack(means, 1), torch.stack(stds, 1), torch.stack(rs, 1)

    def loss(self, b) -> dict:
        m, s, r = self.rollout(b["z"], b["a"])
        nll = gaussian_nll(b["z_next"], m, s).mean()
        rew = F.mse_loss(r, b["r"])
        return {"nll": nll, "reward": rew, "total": nll + rew, "mean": m}


class GeoGRUWM(GRUWM):
    """GRU model whose latent errors are also weighted through a frozen field decoder."""

    def __init__(self, cfg: WMConfig = WMConfig(), decoder: nn.Module | None = None):
        super().__init__(cfg)
        self.decoder = decoder if decoder is not None else nn.Identity()
        self.decoder.requires_grad_(False)

    def set_decoder(self, decoder: nn.Module):
        self.decoder = decoder
        self.decoder.requires_grad_(False)

    def loss(self, b) -> dict:
        out = super().loss(b)
        geo = ((self.decoder(out["mean"]) - self.decoder(b["z_next"])) ** 2).sum(-1).mean()
        out["geo"] = geo
        out["total"] = out["total"] + self.cfg.geo_weight * geo
        return out


def fit_field_decoder(ds: LatentDataset, epochs: int = 200, hidden: int = 256, lr: float = 1e-3,
                      seed: int = 0) -> nn.Module:
    """Regress coarse fields from latents once on nominal data; the result is frozen."""
    if ds.field is None:
        raise ValueError("dataset carries no coarse fields")
    torch.manual_seed(seed)
    dec = mlp(ds.dim, hidden, ds.field.shape[1], layers=1)
    z = torch.as_tensor(ds.z_next)
    f = torch.as_tensor(ds.field)
    opt = torch.optim.Adam(dec.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        F.mse_loss(dec(z), f).backward()
        opt.step()
    return dec.requires_grad_(False).eval()


class RSSMWM(nn.Module):
    """Deterministic GRU state h plus stochastic state s; observations are the latents z.

    step() filters the current z through the posterior, advances h, samples
    the next stochastic state from the prior and decodes the next latent.
    """
    stochastic = True
    sequential = True

    def __init__(self, cfg: WMConfig = WMConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg
        self.cell = nn.GRUCell(c.stoch + c.act_dim, c.deter)
        self.prior = mlp(c.deter, c.hidden, 2 * c.stoch, layers=1)
        self.post = mlp(c.deter + c.latent_dim, c.hidden, 2 * c.stoch, layers=1)
        self.dec = mlp(c.deter + c.stoch, c.hidden, 2 * c.latent_dim, layers=1)
        self.rew = mlp(c.deter + c.stoch, c.hidden, 1, layers=1)
        self._sample_gen: torch.Generator | None = None

    def _dist(self, net, x):
        mu, raw = net(x).chunk(2, -1)
        return mu, _std(raw, self.cfg.std_floor)

    def _sample(self, mu, std, sample: bool):
        if not sample:
            return mu
        eps = torch.randn(mu.shape, generator=self._sample_gen) if self._sample_gen is not None \
            else torch.randn_like(mu)
        return mu + std * eps

    def initial_state(self, n: int):
        return torch.zeros(n, self.cfg.deter)

    def step(self, h, z, a, sample: bool = True):
        s = self._sample(*self._dist(self.post, torch.cat([h, z], -1)), sample)
        h = self.cell(torch.cat([s, a], -1), h)
        s2 = self._sample(*self._dist(self.prior, h), sample)
        feat = torch.cat([h, s2], -1)
        mu, std = self._dist(self.dec, feat)
        return mu, std, self.rew(feat).squeeze(-1), h

    def loss(self, b) -> dict:
        z, a = b["z"], b["a"]
        obs = torch.cat([z, b["z_next"][:, -1:]], dim=1)  # o_0 .. o_L
        h = self.initial_state(z.shape[0])
        nll, kl, rew = 0.0, 0.0, 0.0
        kl_raw = []
        L = z.shape[1]
        for k in range(L + 1):
            mq, sq = self._dist(self.post, torch.cat([h, obs[:, k]], -1))
            mp, sp = self._dist(self.prior, h)
            s = mq + sq * torch.randn_like(mq)
            feat = torch.cat([h, s], -1)
            md, sd = self._dist(self.dec, feat)
            nll = nll + gaussian_nll(obs[:, k], md, sd).mean()
            kl = kl + balanced_kl(mq, sq, mp, sp, self.cfg.kl_balance).mean()
            kl_raw.append(diag_kl(mq, sq, mp, sp).detach())
            if k > 0:
                rew = rew + F.mse_loss(self.rew(feat).squeeze(-1), b["r"][:, k - 1])
            if k < L:
                h = self.cell(torch.cat([s, a[:, k]], -1), h)
        nll, kl, rew = nll / (L + 1), kl / (L + 1), rew / L
        return {"nll": nll, "kl": kl, "kl_raw": torch.stack(kl_raw).min(), "reward": rew,
                "total": nll + self.cfg.kl_weight * kl + rew}


class KoopmanWM(nn.Module):
    """z' = A z + B a + eps(z, a); eps is a small scaled MLP whose magnitude is penalized."""
    stochastic = False
    sequential = False

    def __init__(self, cfg: WMConfig = WMConfig()):
        super().__init__()
        self.cfg = cfg
        d, m = cfg.latent_dim, cfg.act_dim
        self.A = nn.Parameter(torch.eye(d))
        self.B = nn.Parameter(torch.zeros(d, m))
        self.residual = mlp(d + m, cfg.hidden, d, layers=1)
        self.rew = mlp(d + m, cfg.hidden, 1, layers=1)

    def initial_state(self, n: int):
        return None

    def eps(self, z, a):
        if self.cfg.residual_scale == 0:
            return torch.zeros_like(z)
        return self.cfg.residual_scale * torch.tanh(self.residual(torch.cat([z, a], -1)))

    def linear(self, z, a):
        return z @ self.A.T + a @ self.B.T

    def step(self, state, z, a):
        za = torch.cat([z, a], -1)
        return self.linear(z, a) + self.eps(z, a), None, self.rew(za).squeeze(-1), state

    def loss(self, b) -> dict:
        e = self.eps(b["z"], b["a"])
        pred = self.linear(b["z"], b["a"]) + e
        lz = ((pred - b["z_next"]) ** 2).sum(-1).mean()
        lr = F.mse_loss(self.rew(torch.cat([b["z"], b["a"]], -1)).squeeze(-1), b["r"])
        pen = (e ** 2).sum(-1).mean()
        return {"mse": lz, "reward": lr, "residual": pen,
                "total": lz + lr + self.cfg.residual_weight * pen, "mean": pred}

    @torch.no_grad()
    def warm_start(self, z: np.ndarray, a: np.ndarray, z_next: np.ndarray):
        """Least-squares (DMDc) fit of [A B] on one-step tuples."""
        X = np.concatenate([z, a], axis=1).astype(np.float64)
        sol, *_ = np.linalg.lstsq(X, z_next.astype(np.float64), rcond=None)
        d = z.shape[1]
        self.A.copy_(torch.as_tensor(sol[:d].T, dtype=torch.float32))
        self.B.copy_(torch.as_tensor(sol[d:].T, dtype=torch.float32))


def least_squares_loss(z: np.ndarray, a: np.ndarray, z_next: np.ndarray) -> float:
    """Mean one-step squared error of the best linear [A B] on the same tuples."""
    X = np.concatenate([z, a], axis=1).astype(np.float64)
    sol, *_ = np.linalg.lstsq(X, z_next.astype(np.float64), rcond=None)
    return float(((X @ sol - z_next) ** 2).sum(-1).mean())


def build_backbone(name: str, cfg: WMConfig = WMConfig()) -> nn.Module:
    if name == "gru":
        return GRUWM(cfg)
    if name == "geogru":
        return GeoGRUWM(cfg)
    if name == "rssm":
        return RSSMWM(cfg)
    if name == "koopman":
        return KoopmanWM(cfg)
    raise ValueError(f"unknown backbone {name!r}; expected one of {BACKBONES}")


# -- training ---------------------------------------------------------------------

def _tensors(ds: LatentDataset, idx) -> dict:
    t = lambda x: torch.as_tensor(x[idx], dtype=torch.float32)
    return {"z": t(ds.z), "a": t(ds.a), "r": t(ds.r), "z_next": t(ds.z_next)}


class WMTrainer:
    """Adam over a model's trainable parameters; sampling keyed to its own generator."""

    def __init__(self, model: nn.Module, lr: float = 1e-3, batch: int = 64, seed: int = 0):
        self.model = model
        self.batch = batch
        self.rng = np.random.default_rng(seed)
        self.opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr)

    def _units(self, ds: LatentDataset) -> np.ndarray:
        if getattr(self.model, "sequential", False):
            w = ds.windows(self.model.cfg.window)
            if not len(w):
                raise ValueError("no contiguous windows of the configured length in the dataset")
            return w
        return np.arange(len(ds))

    def evaluate(self, ds: LatentDataset) -> float:
        units = self._units(ds)
        with torch.no_grad():
            return float(self.model.loss(_tensors(ds, units))["total"].item())

    def fit(self, ds: LatentDataset, steps: int) -> list[float]:
        if len(ds) == 0:
            raise ValueError("empty latent dataset")
        units = self._units(ds)
        losses = []
        self.model.train()
        for _ in range(steps):
            pick = units[self.rng.integers(0, len(units), size=min(self.batch, len(units)))]
            out = self.model.loss(_tensors(ds, pick))
            self.opt.zero_grad()
            out["total"].backward()
            self.opt.step()
            losses.append(float(out["total"].item()))
        return losses


def pretrain_offline(ds: LatentDataset, backbone: str, steps: int = 500, cfg: WMConfig = WMConfig(),
                     holdout: float = 0.2, seed: int = 0, lr: float = 1e-3, batch: int = 64,
                     decoder: nn.Module | None = None) -> tuple[nn.Module, dict]:
    """Train one backbone; returns the model and held-out losses before/after training."""
    if len(ds) == 0:
        raise ValueError("empty latent dataset")
    torch.manual_seed(seed)
    model = build_backbone(backbone, cfg)
    if backbone == "geogru":
        model.set_decoder(decoder if decoder is not None else fit_field_decoder(ds, seed=seed))
    train, held = ds.split_by_episode(holdout, seed)
    if backbone == "koopman":
        model.warm_start(train.z, train.a, train.z_next)
    trainer = WMTrainer(model, lr, batch, seed)
    before = trainer.evaluate(held) if len(held) else float("nan")
    losses = trainer.fit(train, steps)
    after = trainer.evaluate(held) if len(held) else float("nan")
    return model, {"heldout_before": before, "heldout_after": after, "train_last": losses[-1] if losses else None,
                   "trainer": trainer}


# -- ensembles and imagination ------------------------------------------------------

class Ensemble(nn.Module):
    """K independently initialized members; each imagined step uses one uniformly chosen member."""

    def __init__(self, members: list[nn.Module]):
        super().__init__()
        if not members:
            raise ValueError("ensemble needs at least one member")
        self.members = nn.ModuleList(members)

    def __len__(self):
        return len(self.members)

    def initial_state(self, n: int):
        return [m.initial_state(n) for m in self.members]

    def step(self, states, z, a, rng: np.random.Generator, generator: torch.Generator | None = None,
             sample: bool = True):
        k = int(rng.integers(len(self.members)))
        outs = [_member_step(m, s, z, a, generator, sample) for m, s in zip(self.members, states)]
        mean, std, r, _ = outs[k]
        if sample and std is not None:
            eps = torch.randn(mean.shape, generator=generator) if generator is not None else torch.randn_like(mean)
            z2 = mean + std * eps
        else:
            z2 = mean
        return z2, r, [o[3] for o in outs], k


def _member_step(m, state, z, a, generator, sample):
    if isinstance(m, RSSMWM):
        m._sample_gen = generator
        try:
            return m.step(state, z, a, sample)
        finally:
            m._sample_gen = None
    return m.step(state, z, a)


def build_ensemble(backbone: str, k: int = 3, cfg: WMConfig = WMConfig(), seed: int = 0,
                   decoder: nn.Module | None = None) -> Ensemble:
    members = []
    for i in range(k):
        torch.manual_seed(seed * 1000 + i)
        m = build_backbone(backbone, cfg)
        if backbone == "geogru" and decoder is not None:
            m.set_decoder(decoder)
        members.append(m)
    return Ensemble(members)


def pretrain_ensemble(ds: LatentDataset, backbone: str, k: int = 3, steps: int = 500,
                      cfg: WMConfig = WMConfig(), seed: int = 0, batch: int = 64,
                      lr: float = 1e-3) -> tuple[Ensemble, list[WMTrainer]]:
    decoder = fit_field_decoder(ds, seed=seed) if backbone == "geogru" else None
    ens = build_ensemble(backbone, k, cfg, seed, decoder)
    trainers = []
    for i, m in enumerate(ens.members):
        if backbone == "koopman":
            m.warm_start(ds.z, ds.a, ds.z_next)
        tr = WMTrainer(m, lr, batch, seed * 1000 + i)
        tr.fit(ds, steps)
        trainers.append(tr)
    return ens, trainers


@torch.no_grad()
def teacher_forced_predictions(model: nn.Module, ds: LatentDataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean one-step predictions for every tuple; recurrent state runs along each segment."""
    pz = np.zeros_like(ds.z_next)
    pr = np.zeros_like(ds.r)
    for seg in ds.segments():
        z = torch.as_tensor(ds.z[seg])
        a = torch.as_tensor(ds.a[seg])
        state = model.initial_state(1)
        for k in range(len(seg)):
            if isinstance(model, RSSMWM):
                m, _, r, state = model.step(state, z[k:k + 1], a[k:k + 1], sample=False)
            else:
                m, _, r, state = model.step(state, z[k:k + 1], a[k:k + 1])
            pz[seg[k]] = m[0].numpy()
            pr[seg[k]] = float(r[0])
    return pz, pr


def ensemble_predictions(ens: Ensemble, ds: LatentDataset) -> tuple[np.ndarray, np.ndarray]:
    preds = [teacher_forced_predictions(m, ds) for m in ens.members]
    return np.mean([p[0] for p in preds], axis=0), np.mean([p[1] for p in preds], axis=0)


# -- residual adapters ---------------------------------------------------------------

class ResidualAdapter(nn.Module):
    """Additive corrections dz(z, a), dr(z, a) on top of a frozen nominal model."""

    def __init__(self, nominal: nn.Module, latent_dim: int = LATENT_DIM, act_dim: int = ACT_DIM,
                 hidden: int = 128):
        super().__init__()
        self.nominal = nominal
        self.nominal.requires_grad_(False)
        self.nominal_hash = param_hash(nominal)
        self.dz = mlp(latent_dim + act_dim, hidden, latent_dim, layers=1)
        self.dr = mlp(latent_dim + act_dim, hidden, 1, layers=1)
        for net in (self.dz, self.dr):
            nn.init.zeros_(net[-1].weight)
            nn.init.zeros_(net[-1].bias)

    def delta(self, z, a):
        za = torch.cat([z, a], -1)
        return self.dz(za), self.dr(za).squeeze(-1)

    def corrected(self, z_nom, r_nom, z, a):
        dz, dr = self.delta(z, a)
        return z_nom + dz, r_nom + dr

    def verify_frozen(self):
        if param_hash(self.nominal) != self.nominal_hash:
            raise RuntimeError("nominal world model changed under its residual adapter")

    def initial_state(self, n: int):
        return self.nominal.initial_state(n)

    def step(self, states, z, a, rng: np.random.Generator, generator=None, sample: bool = True):
        z2, r, states, k = self.nominal.step(states, z, a, rng, generator, sample)
        z2, r = self.corrected(z2, r, z, a)
        return z2, r, states, k


def adapter_errors(adapter: ResidualAdapter, ds: LatentDataset, pz: np.ndarray,
                   pr: np.ndarray) -> dict[str, float]:
    """Mean squared one-step errors, nominal vs corrected, given nominal predictions."""
    z = torch.as_tensor(ds.z)
    a = torch.as_tensor(ds.a)
    with torch.no_grad():
        cz, cr = adapter.corrected(torch.as_tensor(pz), torch.as_tensor(pr), z, a)
    zn, r = ds.z_next, ds.r
    return {"nominal_latent": float(((pz - zn) ** 2).sum(-1).mean()),
            "nominal_reward": float(((pr - r) ** 2).mean()),
            "corrected_latent": float(((cz.numpy() - zn) ** 2).sum(-1).mean()),
            "corrected_reward": float(((cr.numpy() - r) ** 2).mean())}


def fit_residual_adapter(ds: LatentDataset, nominal: nn.Module, steps: int = 500, lr: float = 1e-3,
                         batch: int = 64, min_tuples: int = 20, seed: int = 0,
                         weight_decay: float = 1e-4, val_frac: float = 0.25,
                         check_every: int = 25) -> tuple[ResidualAdapter, dict]:
    """Fit the corrections on abnormal tuples with the nominal model held fixed.

    A slice of the tuples is held back for model selection: the returned
    adapter is the snapshot with the lowest validation error, starting from
    the zero correction (the nominal model itself).
    """
    if len(ds) < min_tuples:
        raise ValueError(f"adapter fitting needs at least {min_tuples} abnormal tuples, got {len(ds)}")
    torch.manual_seed(seed)
    adapter = ResidualAdapter(nominal, ds.dim, ds.a.shape[1])
    predict = ensemble_predictions if isinstance(nominal, Ensemble) else teacher_forced_predictions
    pz, pr = predict(nominal, ds)
    z, a = torch.as_tensor(ds.z), torch.as_tensor(ds.a)
    tz, tr = torch.as_tensor(ds.z_next), torch.as_tensor(ds.r)
    nz, nr = torch.as_tensor(pz), torch.as_tensor(pr)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_val = int(round(val_frac * len(ds))) if val_frac > 0 else 0
    val, fit = perm[:n_val], perm[n_val:]

    def objective(idx):
        cz, cr = adapter.corrected(nz[idx], nr[idx], z[idx], a[idx])
        return ((cz - tz[idx]) ** 2).sum(-1).mean() + ((cr - tr[idx]) ** 2).mean()

    params = list(adapter.dz.parameters()) + list(adapter.dr.parameters())
    opt = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    best, best_state = math.inf, None
    for step in range(steps + 1):
        if n_val and step % check_every == 0:
            with torch.no_grad():
                v = float(objective(val))
            if v < best:
                best = v
                best_state = {k: t.clone() for k, t in adapter.state_dict().items() if not k.startswith("nominal.")}
        if step == steps:
            break
        i = fit[rng.integers(0, len(fit), size=min(batch, len(fit)))]
        loss = objective(i)
        opt.zero_grad()
        loss.backward()
        opt.step()
    if best_state is not None:
        adapter.load_state_dict(best_state, strict=False)
    adapter.verify_frozen()
    return adapter, adapter_errors(adapter, ds, pz, pr)


def copy_frozen(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model).requires_grad_(False)
