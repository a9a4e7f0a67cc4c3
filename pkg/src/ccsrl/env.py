"""POMDP wrapper around the reservoir proxy: actions, rewards, observation regimes.

Well-observation channel order (30 channels, each sample row):

    0-2    gas injection rate of I1..I3            / rate_scale
    3-10   gas production rate of P1..P8           / rate_scale
    11-18  brine production rate of P1..P8         / rate_scale
    19-29  BHP of P1..P8, I1..I3, (bhp - p_init)   / pressure_scale
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .reservoir import (
    ConfigurationError, FluidProps, GeologyConfig, GeologyRealization, GridGeometry,
    ReservoirSimulator, ReservoirState, ScenarioConfig, SimulationFailure, SimulatorConfig,
    WellSampleSeries, apply_scenario_physics, default_wells,
)

log = logging.getLogger(__name__)

N_ACTIONS = 11
N_PRODUCERS = 8
N_INJECTORS = 3
I3_INDEX = 10
WELL_CHANNELS = 30
REGIMES = ("privileged", "well_only", "history", "masked_critic", "teacher_student")
TRACE_SCHEMA = "ccsrl.trace/1"


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 20
    dt_days: float = 730.0
    n_samples: int = 9
    history_len: int = 20
    # reward
    c_co2: float = 1.0
    c_brine: float = 0.25
    bonus: float = 0.2
    q_lo: float = 2500.0  # net storage window, m3/day
    q_hi: float = 7500.0
    rho: float = 1.0
    c_leak: float = 5.0
    s_star: float = 0.05
    failure_reward: float = 0.0
    # normalization
    vol_scale: float = 5.0e6  # m3
    rate_scale: float = 3000.0  # m3/day
    pressure_scale: float = 1.0e7  # Pa
    scenario_id: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.history_len < 1 or self.n_samples < 1:
            raise ConfigurationError("horizon, history length and sample count must be >= 1")
        if not self.q_lo < self.q_hi:
            raise ConfigurationError("reward window needs q_lo < q_hi")
        if not 0 < self.rho <= 1:
            raise ConfigurationError("rho must lie in (0, 1]")
        if self.scenario_id not in (0, 1, 2, 3):
            raise ConfigurationError(f"unknown scenario id {self.scenario_id}")


@dataclass
class RewardBreakdown:
    retained_value: float = 0.0  # discounted c_co2 * (injected - produced gas)
    gas_penalty: float = 0.0  # produced-gas part, already inside retained_value
    brine_penalty: float = 0.0
    storage_bonus: float = 0.0
    leakage_penalty: float = 0.0
    total: float = 0.0
    failed: bool = False


@dataclass
class ObservationBundle:
    spatial: np.ndarray  # (2, nz, nx, ny)
    well: np.ndarray  # (n_samples, 30)
    history: np.ndarray  # (L, n_samples, 30)
    t: int = 0


# -- actions -------------------------------------------------------------------

def map_action(a, q_min, q_max) -> np.ndarray:
    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    return q_min + (a + 1.0) * 0.5 * (q_max - q_min)


def inverse_map_action(rates, q_min, q_max) -> np.ndarray:
    return 2.0 * (np.asarray(rates, dtype=float) - q_min) / (q_max - q_min) - 1.0


def mask_action(a, scenario_id: int):
    """Scenario 1 pins I3 at its lower bound; works on numpy arrays and torch tensors."""
    if scenario_id != 1:
        return a
    a = a.clone() if hasattr(a, "clone") else np.array(a, dtype=float, copy=True)
    a[..., I3_INDEX] = -1.0
    return a


# -- reward ----------------------------------------------------------------------

def compute_reward(g_inj: float, g_prod: float, w_prod: float, q_net: float, s_leak: float,
                   cfg: EnvConfig, t: int) -> RewardBreakdown:
    """Reward from normalized interval volumes; ``q_net`` in m3/day, ``t`` zero-based."""
    disc = cfg.rho**t
    retained = disc * cfg.c_co2 * (g_inj - g_prod)
    brine = disc * cfg.c_brine * w_prod
    bonus = cfg.bonus if cfg.q_lo <= q_net <= cfg.q_hi else 0.0
    leak = cfg.c_leak * max(0.0, s_leak - cfg.s_star) if cfg.scenario_id == 2 else 0.0
    return RewardBreakdown(retained, disc * cfg.c_co2 * g_prod, brine, bonus, leak,
                           retained - brine + bonus - leak)


# -- observations ------------------------------------------------------------------

def well_observation(series: WellSampleSeries, cfg: EnvConfig, p_init: float) -> np.ndarray:
    inj = slice(N_PRODUCERS, N_PRODUCERS + N_INJECTORS)
    prod = slice(0, N_PRODUCERS)
    y = np.concatenate([
        series.gas_rates[:, inj] / cfg.rate_scale,
        series.gas_rates[:, prod] / cfg.rate_scale,
        series.water_rates[:, prod] / cfg.rate_scale,
        (series.bhp - p_init) / cfg.pressure_scale,
    ], axis=1)
    return y.astype(np.float32)


def denormalize_well(y: np.ndarray, cfg: EnvConfig, p_init: float) -> dict:
    y = np.asarray(y, dtype=float)
    return {
        "injection": y[:, 0:3] * cfg.rate_scale,
        "gas_production": y[:, 3:11] * cfg.rate_scale,
        "brine_production": y[:, 11:19] * cfg.rate_scale,
        "bhp": y[:, 19:30] * cfg.pressure_scale + p_init,
    }


def spatial_observation(state: ReservoirState, grid: GridGeometry, cfg: EnvConfig,
                        p_init: float) -> np.ndarray:
    p = (state.pressure - p_init) / cfg.pressure_scale
    return np.stack([p.reshape(grid.shape), state.gas_saturation.reshape(grid.shape)]).astype(np.float32)


def update_history(history: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Drop the oldest block and append ``y`` last."""
    out = np.empty_like(history)
    out[:-1] = history[1:]
    out[-1] = y
    return out


def observation_view(bundle: ObservationBundle, regime: str) -> dict:
    """Inputs per network role; ``teacher`` is present only for teacher-student."""
    s, y, h = bundle.spatial, bundle.well, bundle.history
    if regime == "privileged":
        return {"actor": (s, y), "critic": (s, y)}
    if regime == "well_only":
        return {"actor": (y,), "critic": (y,)}
    if regime == "history":
        return {"actor": (h, y), "critic": (h, y)}
    if regime == "masked_critic":
        return {"actor": (y,), "critic": (s, y)}
    if regime == "teacher_student":
        return {"actor": (h, y), "critic": (h, y), "teacher": (s, h, y)}
    raise ConfigurationError(f"unknown observation regime {regime!r}")


# -- traces -----------------------------------------------------------------------

class TraceWriter:
    """Line-delimited JSON episode traces."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a")

    def write(self, record: dict):
        self._fh.write(json.dumps({"schema": TRACE_SCHEMA, **record}, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()


# -- environment -------------------------------------------------------------------

class CCSEnv:
    """Episodic CO2-storage control task over a set of geological realizations.

    Each reset draws one realization (uniformly, from the env's own RNG)
    unless an index is given. One simulator is kept per realization.
    """

    def __init__(self, grid: GridGeometry, realizations: list[GeologyRealization],
                 cfg: EnvConfig = EnvConfig(), sim_cfg: SimulatorConfig = SimulatorConfig(),
                 scenario_cfg: ScenarioConfig = ScenarioConfig(), fluid: FluidProps = FluidProps(),
                 geology: GeologyConfig = GeologyConfig(), seed: int = 0,
                 trace_path: Path | None = None):
        if not realizations:
            raise ConfigurationError("environment needs at least one realization")
        self.grid = grid
        self.realizations = list(realizations)
        self.cfg = cfg
        self.physics = apply_scenario_physics(grid, cfg.scenario_id, scenario_cfg)
        self._sim_args = dict(physics=self.physics, fluid=fluid, cfg=sim_cfg, geology=geology,
                              wells=default_wells(grid))
        self._sims: dict[int, ReservoirSimulator] = {}
        self.rng = np.random.default_rng(seed)
        self.p_init = sim_cfg.initial_pressure
        self.trace = TraceWriter(trace_path) if trace_path else None
        self.real_steps = 0
        self.episodes = 0
        self.failures = 0
        self._forbidden = False
        self.sim: ReservoirSimulator | None = None
        self.state: ReservoirState | None = None
        self.obs: ObservationBundle | None = None
        self.t = 0
        self.done = True
        self.last_action: np.ndarray | None = None
        self.last_series: WellSampleSeries | None = None

    # simulator-free code paths set this to catch accidental real calls
    @property
    def forbidden(self) -> bool:
        return self._forbidden

    @forbidden.setter
    def forbidden(self, value: bool):
        self._forbidden = bool(value)
        for sim in self._sims.values():
            sim.forbidden = self._forbidden

    def simulator(self, index: int) -> ReservoirSimulator:
        if index not in self._sims:
            sim = ReservoirSimulator(self.grid, self.realizations[index], **self._sim_args)
            sim.forbidden = self._forbidden
            self._sims[index] = sim
        return self._sims[index]

    @property
    def q_min(self) -> np.ndarray:
        return self.simulator(0).q_min

    @property
    def q_max(self) -> np.ndarray:
        return self.simulator(0).q_max

    def simulator_calls(self) -> list[np.ndarray]:
        return [r for i in sorted(self._sims) for r in self._sims[i].call_log]

    def reset(self, realization_index: int | None = None) -> ObservationBundle:
        if realization_index is None:
            realization_index = int(self.rng.integers(len(self.realizations)))
        self.realization_index = realization_index
        self.sim = self.simulator(realization_index)
        self.state = self.sim.initial_state()
        self.t = 0
        self.done = False
        self.episodes += 1
        n = self.cfg.n_samples
        # before the first interval no well flows, so rates and BHP offsets are zero
        self.obs = ObservationBundle(
            spatial_observation(self.state, self.grid, self.cfg, self.p_init),
            np.zeros((n, WELL_CHANNELS), dtype=np.float32),
            np.zeros((self.cfg.history_len, n, WELL_CHANNELS), dtype=np.float32),
            0,
        )
        return self.obs

    def step(self, a) -> tuple[ObservationBundle, float, bool, RewardBreakdown]:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        a = np.clip(np.asarray(a, dtype=float).reshape(N_ACTIONS), -1.0, 1.0)
        a = mask_action(a, self.cfg.scenario_id)
        rates = map_action(a, self.sim.q_min, self.sim.q_max)
        self.last_action = a
        t = self.t
        try:
            new_state, series = self.sim.simulate_interval(self.state, rates, self.cfg.dt_days,
                                                           self.cfg.n_samples)
        except SimulationFailure as exc:
            log.warning("episode %d step %d: simulation failure (%s)", self.episodes, t, exc)
            self.failures += 1
            self.real_steps += 1
            self.t += 1
            self.done = True
            br = RewardBreakdown(total=self.cfg.failure_reward, failed=True)
            self._trace(t, a, rates, None, br)
            return self.obs, br.total, True, br

        c = self.cfg
        br = compute_reward(series.gas_injected / c.vol_scale, series.gas_produced / c.vol_scale,
                            series.brine_produced / c.vol_scale,
                            (series.gas_injected - series.gas_produced) / c.dt_days,
                            series.leak_saturation, c, t)
        y = well_observation(series, c, self.p_init)
        self.state = new_state
        self.last_series = series
        self.real_steps += 1
        self.t += 1
        self.done = self.t >= c.horizon
        self.obs = ObservationBundle(spatial_observation(new_state, self.grid, c, self.p_init), y,
                                     update_history(self.obs.history, y), self.t)
        self._trace(t, a, rates, series, br)
        return self.obs, br.total, self.done, br

    def _trace(self, t, a, rates, series, br):
        if self.trace is None:
            return
        self.trace.write({
            "episode": self.episodes, "t": t, "realization": int(self.realization_index),
            "action": a.tolist(), "rates": rates.tolist(),
            "applied_rates": series.applied_rates.tolist() if series is not None else None,
            "well_obs": self.obs.well.tolist(), "reward": asdict(br), "done": self.done,
        })

    def close(self):
        if self.trace:
            self.trace.close()
