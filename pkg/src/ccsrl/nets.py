"""Network building blocks shared by the model-free and latent agents."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

N_SAMPLES = 9
WELL_CHANNELS = 30
ACT_DIM = 11
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
CHECKPOINT_SCHEMA = "ccsrl.checkpoint/1"


def mlp(in_dim: int, hidden: int, out_dim: int, layers: int = 2) -> nn.Sequential:
    mods, d = [], in_dim
    for _ in range(layers):
        mods += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    mods.append(nn.Linear(d, out_dim))
    return nn.Sequential(*mods)


class WellEncoder(nn.Module):
    """Conv1d over the intra-interval samples (30 well channels in), ReLU, mean pool."""

    def __init__(self, d: int = 64, kernel: int = 3):
        super().__init__()
        self.d = d
        self.conv = nn.Conv1d(WELL_CHANNELS, d, kernel)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[-2:] != (N_SAMPLES, WELL_CHANNELS):
            raise ValueError(f"well observation must end in {(N_SAMPLES, WELL_CHANNELS)}, got {tuple(y.shape)}")
        lead = y.shape[:-2]
        x = y.reshape(-1, N_SAMPLES, WELL_CHANNELS).transpose(1, 2)
        e = F.relu(self.conv(x)).mean(dim=-1)
        return e.reshape(*lead, self.d)


class SpatialEncoder(nn.Module):
    """Four strided Conv3d layers then global average pooling; grid-size agnostic."""

    def __init__(self, out_dim: int = 64, channels=(8, 16, 32, 64), in_channels: int = 2):
        super().__init__()
        layers, c = [], in_channels
        for n in channels:
            layers += [nn.Conv3d(c, n, 3, stride=(1, 2, 2), padding=1), nn.ReLU()]
            c = n
        self.conv = nn.Sequential(*layers)
        self.proj = nn.Identity() if out_dim == c else nn.Linear(c, out_dim)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.conv(x).mean(dim=(2, 3, 4)))


class GRUGate(nn.Module):
    """GRU-style gate mixing a residual stream ``x`` with a sublayer output ``y``."""

    def __init__(self, d: int, gate_bias: float = 2.0):
        super().__init__()
        self.w = nn.Linear(d, 3 * d, bias=False)  # W_r, W_u, W_h applied to y
        self.u = nn.Linear(d, 2 * d, bias=False)  # U_r, U_u applied to x
        self.u_h = nn.Linear(d, d, bias=False)
        self.gate_bias = nn.Parameter(torch.full((d,), float(gate_bias)))

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        wr, wu, wh = self.w(y).chunk(3, dim=-1)
        ur, uu = self.u(x).chunk(2, dim=-1)
        r = torch.sigmoid(wr + ur)
        u = torch.sigmoid(wu + uu - self.gate_bias)
        h = torch.tanh(wh + self.u_h(r * x))
        return (1 - u) * x + u * h


class GatedTransformerBlock(nn.Module):
    """Pre-LN self-attention and feedforward sublayers, each with a GRU-gated residual."""

    def __init__(self, d: int = 64, n_heads: int = 4, ffn_hidden: int = 256, gate_bias: float = 2.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.gate1 = GRUGate(d, gate_bias)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_hidden), nn.ReLU(), nn.Linear(ffn_hidden, d))
        self.gate2 = GRUGate(d, gate_bias)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        h = self.ln1(e)
        a, _ = self.attn(h, h, h, need_weights=False)
        e = self.gate1(e, a)
        return self.gate2(e, self.ffn(self.ln2(e)))


class HistoryEncoder(nn.Module):
    """Shared well encoder over history blocks, one gated block, last-position readout.

    ``concat`` returns [e_cur, h] (2d); ``add`` returns e_cur + h (d).
    """

    def __init__(self, d: int = 64, mode: str = "concat", history_len: int = 20,
                 n_heads: int = 4, ffn_hidden: int = 256, gate_bias: float = 2.0):
        super().__init__()
        if mode not in ("concat", "add"):
            raise ValueError(f"unknown history fusion mode {mode!r}")
        self.mode = mode
        self.well = WellEncoder(d)
        self.pos = nn.Parameter(torch.randn(history_len, d) * 0.02)
        self.block = GatedTransformerBlock(d, n_heads, ffn_hidden, gate_bias)
        self.out_dim = 2 * d if mode == "concat" else d

    def forward(self, history: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        seq = self.well(history) + self.pos[-history.shape[-3]:]
        h = self.block(seq)[..., -1, :]
        e = self.well(y)
        return torch.cat([e, h], dim=-1) if self.mode == "concat" else e + h


class ObsEncoder(nn.Module):
    """Regime-specific encoder over a tuple of observation tensors.

    kinds: ``well`` (y), ``spatial_well`` (x, y), ``history`` (H, y),
    ``spatial_history`` (x, H, y).
    """

    def __init__(self, kind: str, d: int = 64, history_mode: str = "concat",
                 spatial_dim: int = 64, history_len: int = 20):
        super().__init__()
        self.kind = kind
        if kind == "well":
            self.well = WellEncoder(d)
            self.out_dim = d
        elif kind == "spatial_well":
            self.spatial = SpatialEncoder(spatial_dim)
            self.well = WellEncoder(d)
            self.out_dim = spatial_dim + d
        elif kind == "history":
            self.hist = HistoryEncoder(d, history_mode, history_len)
            self.out_dim = self.hist.out_dim
        elif kind == "spatial_history":
            self.spatial = SpatialEncoder(spatial_dim)
            self.hist = HistoryEncoder(d, history_mode, history_len)
            self.out_dim = spatial_dim + self.hist.out_dim
        else:
            raise ValueError(f"unknown encoder kind {kind!r}")

    @property
    def uses_spatial(self) -> bool:
        return self.kind.startswith("spatial")

    def forward(self, *obs: torch.Tensor) -> torch.Tensor:
        if self.kind == "well":
            return self.well(obs[0])
        if self.kind == "spatial_well":
            return torch.cat([self.spatial(obs[0]), self.well(obs[1])], dim=-1)
        if self.kind == "history":
            return self.hist(obs[0], obs[1])
        return torch.cat([self.spatial(obs[0]), self.hist(obs[1], obs[2])], dim=-1)


def squashed_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """log density of a = tanh(u), u ~ N(mean, exp(log_std)^2), summed over the last dim."""
    std = log_std.exp()
    normal = -0.5 * ((u - mean) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(u)^2) written stably
    correction = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))
    return (normal - correction).sum(dim=-1)


class TanhGaussianHead(nn.Module):
    def __init__(self, in_dim: int, act_dim: int = ACT_DIM, hidden: int = 256):
        super().__init__()
        self.net = mlp(in_dim, hidden, 2 * act_dim)

    def forward(self, feature: torch.Tensor):
        mean, log_std = self.net(feature).chunk(2, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, feature: torch.Tensor, deterministic: bool = False,
               generator: torch.Generator | None = None):
        mean, log_std = self(feature)
        if deterministic:
            u = mean
        else:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
            u = mean + log_std.exp() * eps
        return torch.tanh(u), squashed_log_prob(u, mean, log_std)


class Actor(nn.Module):
    def __init__(self, encoder: ObsEncoder, act_dim: int = ACT_DIM, hidden: int = 256):
        super().__init__()
        self.encoder = encoder
        self.head = TanhGaussianHead(encoder.out_dim, act_dim, hidden)

    def forward(self, obs, deterministic: bool = False, generator=None):
        return self.head.sample(self.encoder(*obs), deterministic, generator)


class QHead(nn.Module):
    def __init__(self, in_dim: int, act_dim: int = ACT_DIM, hidden: int = 256):
        super().__init__()
        self.net = mlp(in_dim + act_dim, hidden, 1)

    def forward(self, feature: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([feature, action], dim=-1)).squeeze(-1)


class Critic(nn.Module):
    def __init__(self, encoder: ObsEncoder, act_dim: int = ACT_DIM, hidden: int = 256):
        super().__init__()
        self.encoder = encoder
        self.head = QHead(encoder.out_dim, act_dim, hidden)

    def forward(self, obs, action):
        return self.head(self.encoder(*obs), action)


class DistillHeads(nn.Module):
    """g_dist, trainable p_s, frozen p_t and the scalar value-alignment head."""

    def __init__(self, feature_dim: int = 128, latent_dim: int = 64, proj_dim: int = 64,
                 hidden: int = 256):
        super().__init__()
        self.g_dist = mlp(feature_dim, hidden, latent_dim, layers=1)
        self.p_s = nn.Linear(latent_dim, proj_dim)
        self.p_t = nn.Linear(latent_dim, proj_dim)
        self.p_t.requires_grad_(False)
        self.value = mlp(latent_dim, hidden, 1, layers=1)


# -- checkpoints -----------------------------------------------------------------

def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path: Path, modules: dict[str, nn.Module], cfg: dict, extra: dict | None = None):
    """``<path>.pt`` holds state dicts; ``<path>.json`` the manifest used to verify reloads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: m.state_dict() for k, m in modules.items()}
    torch.save({"state": state, "extra": extra or {}}, path.with_suffix(".pt"))
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "shapes": {k: {n: list(t.shape) for n, t in sd.items()} for k, sd in state.items()},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))


def load_checkpoint(path: Path, modules: dict[str, nn.Module], cfg: dict | None = None) -> dict:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    if cfg is not None and manifest["config_hash"] != config_hash(cfg):
        raise ValueError("checkpoint was written under a different configuration")
    blob = torch.load(path.with_suffix(".pt"), weights_only=False)
    for k, m in modules.items():
        shapes = {n: list(t.shape) for n, t in m.state_dict().items()}
        if shapes != manifest["shapes"][k]:
            raise ValueError(f"checkpoint shapes differ for module {k!r}")
        m.load_state_dict(blob["state"][k])
    return blob["extra"]

