"""Desk-scale two-phase (CO2 gas / brine) reservoir proxy.

Sequential scheme per substep: pressure is solved implicitly with a lumped
total compressibility, then per-cell gas and brine volumes are advanced with
explicit upwind transport (CFL sub-cycled). The conserved variables are the
per-cell phase volumes, so gas and brine balances close to round-off.

Array layout is ``(nz, nx, ny)``, flattened C-order (k, i, j).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels

log = logging.getLogger(__name__)

DAY = 86400.0
MILLIDARCY = 9.869233e-16  # m^2

INJECTOR = "injector"
PRODUCER = "producer"


class ConfigurationError(ValueError):
    pass


class SimulationFailure(RuntimeError):
    """Recoverable solver failure; the caller keeps the pre-interval state."""


_FAILURES = {
    _kernels.NOT_POSITIVE_DEFINITE: "pressure matrix not positive definite",
    _kernels.NON_FINITE: "pressure solve produced non-finite values",
    _kernels.TOO_MANY_SUBCYCLES: "transport exceeds the subcycle limit",
}


# ---------------------------------------------------------------------------
# Static description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridGeometry:
    nx: int = 32
    ny: int = 24
    nz: int = 4
    dx: float = 150.0
    dy: float = 150.0
    dz: float = 15.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ConfigurationError(f"cell counts must be >= 1, got {self.shape}")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ConfigurationError("cell dimensions must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.nx, self.ny)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def flat_index(self, k: int, i: int, j: int) -> int:
        return (k * self.nx + i) * self.ny + j


@dataclass(frozen=True)
class GeologyConfig:
    """Log-normal permeability built from seeded, smoothed Gaussian noise."""

    mean_log_perm: float = math.log(100.0)  # ln(mD)
    std_log_perm: float = 0.8
    correlation_length: float = 3.0  # cells, lateral Gaussian-filter sigma
    porosity_mean: float = 0.2
    porosity_std: float = 0.03
    kv_kh: float = 0.1
    sealed_top_layer: bool = True  # no-flow interface between layers 0 and 1


@dataclass
class GeologyRealization:
    permeability: np.ndarray  # (nz, nx, ny), mD
    porosity: np.ndarray
    realization_id: int
    is_target: bool = False

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.permeability, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.porosity, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class FluidProps:
    gas_viscosity: float = 5.0e-5  # Pa s
    brine_viscosity: float = 5.0e-4
    total_compressibility: float = 1.0e-9  # 1/Pa
    corey_gas: float = 2.0
    corey_brine: float = 2.0
    residual_gas: float = 0.05
    residual_brine: float = 0.2
    mobility_floor: float = 1.0e-3  # 1/(Pa s)

    def __post_init__(self):
        if self.gas_viscosity <= 0 or self.brine_viscosity <= 0:
            raise ConfigurationError("viscosities must be positive")
        if self.total_compressibility <= 0:
            raise ConfigurationError("compressibility must be positive")
        if self.corey_gas < 1 or self.corey_brine < 1:
            raise ConfigurationError("Corey exponents must be >= 1")
        for s in (self.residual_gas, self.residual_brine):
            if not 0 <= s < 0.5:
                raise ConfigurationError("residual saturations must lie in [0, 0.5)")

    def relperm(self, sg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        span = 1.0 - self.residual_gas - self.residual_brine
        se_g = np.clip((sg - self.residual_gas) / span, 0.0, 1.0)
        se_w = np.clip((1.0 - sg - self.residual_brine) / span, 0.0, 1.0)
        return se_g**self.corey_gas, se_w**self.corey_brine

    def mobilities(self, sg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        krg, krw = self.relperm(sg)
        return krg / self.gas_viscosity, krw / self.brine_viscosity

    def gas_fraction(self, sg: np.ndarray) -> np.ndarray:
        lg, lw = self.mobilities(sg)
        return lg / np.maximum(lg + lw, 1e-300)

    def max_fraction_slope(self) -> float:
        s = np.linspace(0.0, 1.0, 20001)
        return float(np.max(np.abs(np.diff(self.gas_fraction(s)) / np.diff(s))))


@dataclass(frozen=True)
class WellSpec:
    name: str
    kind: str  # INJECTOR | PRODUCER
    i: int
    j: int
    k_top: int
    k_bottom: int
    q_min: float  # m3/day
    q_max: float
    well_index: tuple[float, ...] = ()  # Peaceman factor per perforation, m3

    def __post_init__(self):
        if self.kind not in (INJECTOR, PRODUCER):
            raise ConfigurationError(f"unknown well type {self.kind!r}")
        if not self.q_min < self.q_max:
            raise ConfigurationError(f"{self.name}: q_min must be < q_max")
        if self.k_top > self.k_bottom:
            raise ConfigurationError(f"{self.name}: empty perforation interval")

    @property
    def layers(self) -> range:
        return range(self.k_top, self.k_bottom + 1)


# Fractional areal positions; the top layer is the monitored overburden.
PRODUCER_SITES = [
    (0.06, 0.08), (0.06, 0.92), (0.94, 0.08), (0.94, 0.92),
    (0.44, 0.08), (0.56, 0.92), (0.06, 0.44), (0.94, 0.56),
]
INJECTOR_SITES = [(0.25, 0.25), (0.75, 0.75), (0.25, 0.75)]


def default_wells(
    grid: GridGeometry,
    injector_max: float = 3000.0,
    producer_max: float = 1500.0,
) -> list[WellSpec]:
    """Eight producers then three injectors, matching the action layout."""
    k_top = 1 if grid.nz > 1 else 0
    wells = []

    def cell(fx, fy):
        return min(int(fx * grid.nx), grid.nx - 1), min(int(fy * grid.ny), grid.ny - 1)

    for n, (fx, fy) in enumerate(PRODUCER_SITES, 1):
        i, j = cell(fx, fy)
        wells.append(WellSpec(f"P{n}", PRODUCER, i, j, k_top, grid.nz - 1, 0.0, producer_max))
    for n, (fx, fy) in enumerate(INJECTOR_SITES, 1):
        i, j = cell(fx, fy)
        wells.append(WellSpec(f"I{n}", INJECTOR, i, j, k_top, grid.nz - 1, 0.0, injector_max))
    sites = {(w.i, w.j) for w in wells}
    if len(sites) != len(wells):
        raise ConfigurationError(f"grid {grid.nx}x{grid.ny} too small for distinct well columns")
    return wells


@dataclass
class ScenarioPhysics:
    scenario_id: int
    tx_mult: np.ndarray  # (nz, nx-1, ny) face multipliers in [0, 1]
    ty_mult: np.ndarray  # (nz, nx, ny-1)
    tz_mult: np.ndarray  # (nz-1, nx, ny)
    leak_columns: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    leak_transmissibility: float = 0.0  # m3, added on pathway faces between layers 0 and 1
    leakage_region: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    leakage_threshold: float = 0.05

    def __post_init__(self):
        for m in (self.tx_mult, self.ty_mult, self.tz_mult):
            if m.size and (m.min() < 0 or m.max() > 1):
                raise ConfigurationError("transmissibility multipliers must lie in [0, 1]")
        if (self.leakage_region.size > 0) != (self.scenario_id == 2):
            raise ConfigurationError("leakage region must be nonempty iff scenario 2")

    def to_dict(self) -> dict:
        return {
            "schema": "ccsrl.scenario/1",
            "scenario_id": self.scenario_id,
            "restricted_x_faces": np.argwhere(self.tx_mult < 1).tolist(),
            "restricted_y_faces": np.argwhere(self.ty_mult < 1).tolist(),
            "restricted_z_faces": np.argwhere(self.tz_mult < 1).tolist(),
            "restriction_values": sorted({float(v) for m in (self.tx_mult, self.ty_mult, self.tz_mult)
                                          for v in np.unique(m) if v < 1}),
            "leak_columns": self.leak_columns.tolist(),
            "leak_transmissibility": self.leak_transmissibility,
            "leakage_region": self.leakage_region.tolist(),
            "leakage_threshold": self.leakage_threshold,
        }


@dataclass(frozen=True)
class ScenarioConfig:
    compartment_restriction: float = 0.01
    compartment_x: float = 0.5  # fractional position of the x-normal boundary
    compartment_y: float = 0.5
    leak_site: tuple[float, float] = (0.35, 0.75)
    leak_radius: int = 2
    leak_permeability_md: float = 2000.0
    leakage_threshold: float = 0.05


def apply_scenario_physics(grid: GridGeometry, scenario_id: int,
                           cfg: ScenarioConfig = ScenarioConfig()) -> ScenarioPhysics:
    if scenario_id not in (0, 1, 2, 3):
        raise ConfigurationError(f"unknown scenario id {scenario_id}")
    nz, nx, ny = grid.shape
    tx = np.ones((nz, max(nx - 1, 0), ny))
    ty = np.ones((nz, nx, max(ny - 1, 0)))
    tz = np.ones((max(nz - 1, 0), nx, ny))
    kwargs = {"leakage_threshold": cfg.leakage_threshold}
    if scenario_id == 3:
        bx = int(round(cfg.compartment_x * nx))
        by = int(round(cfg.compartment_y * ny))
        if 0 < bx < nx:
            tx[:, bx - 1, :] = cfg.compartment_restriction
        if 0 < by < ny:
            ty[:, :, by - 1] = cfg.compartment_restriction
    elif scenario_id == 2:
        if nz < 2:
            raise ConfigurationError("leakage scenario needs at least two layers")
        li = min(int(cfg.leak_site[0] * nx), nx - 1)
        lj = min(int(cfg.leak_site[1] * ny), ny - 1)
        area = grid.dx * grid.dy
        kv = cfg.leak_permeability_md * MILLIDARCY
        region = [
            grid.flat_index(0, i, j)
            for i in range(max(li - cfg.leak_radius, 0), min(li + cfg.leak_radius + 1, nx))
            for j in range(max(lj - cfg.leak_radius, 0), min(lj + cfg.leak_radius + 1, ny))
        ]
        kwargs.update(
            leak_columns=np.array([[li, lj]]),
            leak_transmissibility=kv * area / grid.dz,
            leakage_region=np.array(sorted(region), dtype=int),
        )
    return ScenarioPhysics(scenario_id, tx, ty, tz, **kwargs)


# ---------------------------------------------------------------------------
# Geology
# ---------------------------------------------------------------------------


def _unit_gaussian_field(grid: GridGeometry, rng: np.random.Generator, corr: float) -> np.ndarray:
    noise = rng.standard_normal(grid.shape)
    if corr <= 0:
        return noise
    sigma = (0.0, corr, corr)
    smooth = gaussian_filter(noise, sigma=sigma, mode="wrap")
    # exact marginal variance of the circulant filter: sum of squared weights
    delta = np.zeros(grid.shape)
    delta[0, 0, 0] = 1.0
    kernel = gaussian_filter(delta, sigma=sigma, mode="wrap")
    return smooth / math.sqrt(float(np.sum(kernel[0] ** 2)))


def generate_realization(grid: GridGeometry, seed: int, cfg: GeologyConfig = GeologyConfig(),
                         is_target: bool = False) -> GeologyRealization:
    rng = np.random.default_rng(seed)
    z = _unit_gaussian_field(grid, rng, cfg.correlation_length)
    perm = np.exp(cfg.mean_log_perm + cfg.std_log_perm * z)
    poro = np.clip(cfg.porosity_mean + cfg.porosity_std * z, 0.05, 0.35)
    return GeologyRealization(perm, poro, int(seed), is_target)


def generate_ensemble(seed: int, n_train: int, target_seed: int, grid: GridGeometry = GridGeometry(),
                      cfg: GeologyConfig = GeologyConfig()):
    """Training realizations plus one held-out target realization.

    Training seeds are drawn from ``SeedSequence(seed)``; the target must not
    collide with any of them.
    """
    if n_train < 1:
        raise ConfigurationError("n_train must be >= 1")
    train_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n_train)]
    if target_seed in train_seeds:
        raise ConfigurationError(f"target seed {target_seed} duplicates a training seed")
    train = [generate_realization(grid, s, cfg) for s in train_seeds]
    target = generate_realization(grid, target_seed, cfg, is_target=True)
    return train, target


def save_geology(path: Path, grid: GridGeometry, cfg: GeologyConfig,
                 realizations: list[GeologyRealization]) -> None:
    """JSON record of how each field was generated, with a content checksum."""
    doc = {
        "schema": "ccsrl.geology/1",
        "grid": grid.__dict__,
        "config": cfg.__dict__,
        "realizations": [
            {"seed": r.realization_id, "is_target": r.is_target, "sha256": r.checksum()}
            for r in realizations
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_geology(path: Path) -> tuple[GridGeometry, GeologyConfig, list[GeologyRealization]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != "ccsrl.geology/1":
        raise ConfigurationError(f"unsupported geology schema {doc.get('schema')!r}")
    grid = GridGeometry(**doc["grid"])
    cfg = GeologyConfig(**doc["config"])
    out = []
    for rec in doc["realizations"]:
        r = generate_realization(grid, rec["seed"], cfg, rec["is_target"])
        if r.checksum() != rec["sha256"]:
            raise ConfigurationError(f"realization {rec['seed']} does not regenerate bitwise")
        out.append(r)
    return grid, cfg, out


# ---------------------------------------------------------------------------
# Dynamic state
# ---------------------------------------------------------------------------


@dataclass
class ReservoirState:
    pressure: np.ndarray  # (n_cells,) Pa
    gas_volume: np.ndarray  # conserved per-cell gas volume, m3
    brine_volume: np.ndarray
    cum_gas_injected: float = 0.0
    cum_gas_produced: float = 0.0
    cum_brine_produced: float = 0.0
    sim_time: float = 0.0  # days
    initial_gas: float = 0.0
    initial_brine: float = 0.0

    @property
    def gas_saturation(self) -> np.ndarray:
        total = self.gas_volume + self.brine_volume
        return np.clip(self.gas_volume / total, 0.0, 1.0)

    def copy(self) -> ReservoirState:
        return replace(self, pressure=self.pressure.copy(), gas_volume=self.gas_volume.copy(),
                       brine_volume=self.brine_volume.copy())


@dataclass
class WellSampleSeries:
    """Intra-interval well samples; rates in m3/day, BHP in Pa."""

    times: np.ndarray  # (n_samples,) days since interval start
    rates: np.ndarray  # (n_samples, n_wells) gas injection rate / total production rate
    gas_rates: np.ndarray  # (n_samples, n_wells) gas produced (producers), injected (injectors)
    water_rates: np.ndarray  # (n_samples, n_wells) brine produced
    bhp: np.ndarray  # (n_samples, n_wells)
    gas_injected: float  # interval totals, m3
    gas_produced: float
    brine_produced: float
    leak_saturation: float  # max gas saturation in the leakage region at interval end
    applied_rates: np.ndarray  # (n_wells,) interval-average rates actually delivered


def mass_balance_report(state: ReservoirState, eps: float = 1.0) -> float:
    """Relative gas (and brine) balance residual.

    Gas: |change in place - injected + produced| / max(injected, eps).
    Brine uses the produced volume, floored at 1e-6 of the initial brine in
    place so round-off on an idle reservoir is not amplified.
    """
    gas = math.fsum(state.gas_volume.tolist())
    brine = math.fsum(state.brine_volume.tolist())
    gas_res = abs((gas - state.initial_gas) - state.cum_gas_injected + state.cum_gas_produced)
    gas_res /= max(state.cum_gas_injected, eps)
    brine_res = abs((brine - state.initial_brine) + state.cum_brine_produced)
    brine_res /= max(state.cum_brine_produced, 1e-6 * state.initial_brine, eps)
    return max(gas_res, brine_res)


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulatorConfig:
    n_substeps: int = 73
    initial_pressure: float = 1.5e7
    injector_bhp_max: float = 3.0e7
    producer_bhp_min: float = 5.0e6
    cfl: float = 0.9
    max_subcycles: int = 200
    wellbore_radius: float = 0.1


class ReservoirSimulator:
    """Single-threaded proxy simulator bound to one realization and scenario.

    The pressure matrix is assembled in (i, j, k) cell order so it is banded
    with half-bandwidth ``ny * nz`` and factorized once per substep. Well
    rates enter through precomputed unit-source responses, which turns the
    BHP-limit check into an ``n_wells``-sized active-set problem.
    """

    def __init__(self, grid: GridGeometry, realization: GeologyRealization,
                 physics: ScenarioPhysics | None = None, fluid: FluidProps = FluidProps(),
                 wells: list[WellSpec] | None = None, cfg: SimulatorConfig = SimulatorConfig(),
                 geology: GeologyConfig = GeologyConfig()):
        self.grid = grid
        self.realization = realization
        self.fluid = fluid
        self.cfg = cfg
        self.physics = physics if physics is not None else apply_scenario_physics(grid, 0)
        self.n_calls = 0
        self.call_log: list[np.ndarray] = []
        self.forbidden = False

        self.pore_volume = (realization.porosity * grid.cell_volume).ravel()
        self._accum = fluid.total_compressibility * self.pore_volume
        self._fluid_params = np.array([
            fluid.gas_viscosity, fluid.brine_viscosity, fluid.corey_gas, fluid.corey_brine,
            fluid.residual_gas, fluid.residual_brine, fluid.mobility_floor, fluid.max_fraction_slope()])
        self._build_faces(geology)
        self.wells = self._complete_wells(wells if wells is not None else default_wells(grid))
        self._build_banded()

    # -- setup ----------------------------------------------------------------

    def _build_faces(self, geology: GeologyConfig):
        g = self.grid
        k_h = self.realization.permeability * MILLIDARCY
        k_v = k_h * geology.kv_kh
        idx = np.arange(g.n_cells).reshape(g.shape)
        a, b, t = [], [], []

        def harmonic(k1, k2, length, area):
            return area / (0.5 * length / k1 + 0.5 * length / k2)

        ph = self.physics
        if g.nx > 1:
            tx = harmonic(k_h[:, :-1, :], k_h[:, 1:, :], g.dx, g.dy * g.dz) * ph.tx_mult
            a.append(idx[:, :-1, :].ravel()); b.append(idx[:, 1:, :].ravel()); t.append(tx.ravel())
        if g.ny > 1:
            ty = harmonic(k_h[:, :, :-1], k_h[:, :, 1:], g.dy, g.dx * g.dz) * ph.ty_mult
            a.append(idx[:, :, :-1].ravel()); b.append(idx[:, :, 1:].ravel()); t.append(ty.ravel())
        if g.nz > 1:
            tz = harmonic(k_v[:-1], k_v[1:], g.dz, g.dx * g.dy) * ph.tz_mult
            if geology.sealed_top_layer:
                tz[0] = 0.0
            for li, lj in ph.leak_columns:
                tz[0, li, lj] += ph.leak_transmissibility
            a.append(idx[:-1].ravel()); b.append(idx[1:].ravel()); t.append(tz.ravel())
        self.face_a = np.concatenate(a) if a else np.zeros(0, dtype=int)
        self.face_b = np.concatenate(b) if b else np.zeros(0, dtype=int)
        self.face_t = np.concatenate(t) if t else np.zeros(0)

    def _complete_wells(self, wells: list[WellSpec]) -> list[WellSpec]:
        g = self.grid
        r_e = 0.14 * math.hypot(g.dx, g.dy)
        out = []
        for w in wells:
            if not (0 <= w.i < g.nx and 0 <= w.j < g.ny and 0 <= w.k_top and w.k_bottom < g.nz):
                raise ConfigurationError(f"well {w.name} lies outside the grid")
            if not w.well_index:
                k = self.realization.permeability[w.k_top:w.k_bottom + 1, w.i, w.j] * MILLIDARCY
                wi = 2 * math.pi * k * g.dz / math.log(r_e / self.cfg.wellbore_radius)
                w = replace(w, well_index=tuple(float(x) for x in wi))
            if len(w.well_index) != len(w.layers) or min(w.well_index) <= 0:
                raise ConfigurationError(f"well {w.name}: invalid well index")
            out.append(w)
        self._perf_cells = [np.array([g.flat_index(k, w.i, w.j) for k in w.layers]) for w in out]
        self._perf_cell = np.concatenate(self._perf_cells)
        self._perf_well = np.concatenate([np.full(len(c), n) for n, c in enumerate(self._perf_cells)])
        self._perf_wi = np.concatenate([np.asarray(w.well_index) for w in out])
        self._sign = np.array([1.0 if w.kind == INJECTOR else -1.0 for w in out])
        self._is_inj = self._sign > 0
        self.q_min = np.array([w.q_min for w in out])
        self.q_max = np.array([w.q_max for w in out])
        self._bhp_limit = np.where(self._is_inj, self.cfg.injector_bhp_max, self.cfg.producer_bhp_min)
        return out

    def _build_banded(self):
        g = self.grid
        # banded position -> flat index, for (i, j, k) ordering
        self._order = np.arange(g.n_cells).reshape(g.shape).transpose(1, 2, 0).ravel()
        rank = np.empty_like(self._order)
        rank[self._order] = np.arange(g.n_cells)
        self._rank = rank
        ra, rb = rank[self.face_a], rank[self.face_b]
        lo = np.minimum(ra, rb)
        d = np.abs(ra - rb)
        self._bw = int(d.max()) if d.size else 0
        self._face_hi = (lo + d).astype(np.int64)
        self._face_off = (self._bw - d).astype(np.int64)

    # -- public API -------------------------------------------------------------

    def initial_state(self) -> ReservoirState:
        n = self.grid.n_cells
        brine = self.pore_volume.copy()
        return ReservoirState(
            pressure=np.full(n, self.cfg.initial_pressure),
            gas_volume=np.zeros(n),
            brine_volume=brine,
            initial_gas=0.0,
            initial_brine=math.fsum(brine.tolist()),
        )

    def clip_rates(self, rates) -> np.ndarray:
        return np.clip(np.asarray(rates, dtype=float), self.q_min, self.q_max)

    def well_connection(self, state: ReservoirState, w_idx: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-perforation connection mobility WI*lambda_t (m3/(Pa s)) and cell pressures."""
        cells = self._perf_cells[w_idx]
        lg, lw = self.fluid.mobilities(state.gas_saturation[cells])
        lam = np.asarray(self.wells[w_idx].well_index) * (lg + lw)
        return lam, state.pressure[cells]

    def peaceman_bhp(self, state: ReservoirState, w_idx: int, rate: float) -> float:
        """BHP (Pa) delivering ``rate`` m3/day; injectors above, producers below cell pressure."""
        lam, p = self.well_connection(state, w_idx)
        floor = self.fluid.mobility_floor * np.asarray(self.wells[w_idx].well_index)
        if np.any(lam < floor):
            log.warning("well %s: connection mobility below floor, clamping", self.wells[w_idx].name)
            lam = np.maximum(lam, floor)
        total = float(lam.sum())
        p_w = float(np.dot(lam, p) / total)
        return p_w + self._sign[w_idx] * rate / DAY / total

    def simulate_interval(self, state: ReservoirState, rates, dt_days: float = 730.0,
                          n_samples: int = 9) -> tuple[ReservoirState, WellSampleSeries]:
        """Advance one control interval at the requested well rates (m3/day).

        Rates are targets: wells whose BHP limit binds deliver less. On
        :class:`SimulationFailure` the input state is left untouched.
        """
        if self.forbidden:
            raise RuntimeError("simulator called inside a simulation-free code path")
        if not (np.all(np.isfinite(state.pressure)) and np.all(np.isfinite(state.gas_volume))
                and np.all(np.isfinite(state.brine_volume))):
            raise FloatingPointError("non-finite reservoir state")
        rates = np.asarray(rates, dtype=float)
        if (rates.shape != (len(self.wells),) or np.any(rates < self.q_min - 1e-9)
                or np.any(rates > self.q_max + 1e-9)):
            raise ConfigurationError("well rates outside WellSpec bounds")
        self.n_calls += 1
        self.call_log.append(rates.copy())

        new = state.copy()
        n_sub = self.cfg.n_substeps
        dt = dt_days * DAY / n_sub
        # sample j is taken at the end of the substep closest to (j+1)/n_samples of the interval
        sample_of_step = np.full(n_sub, -1, dtype=np.int64)
        for j in range(n_samples):
            sample_of_step[min(n_sub, max(1, round((j + 1) * n_sub / n_samples))) - 1] = j
        nw = len(self.wells)
        series = {k: np.zeros((n_samples, nw)) for k in ("rates", "gas", "water", "bhp")}
        delivered = np.zeros(nw)
        totals = np.zeros(3)
        status = _kernels.run_interval(
            new.pressure, new.gas_volume, new.brine_volume, self._accum,
            self.face_a, self.face_b, self.face_t, self._rank, self._face_hi, self._face_off, self._bw,
            self._perf_cell, self._perf_well, self._perf_wi, self._is_inj, self._sign,
            self._bhp_limit, rates, self._fluid_params, dt, n_sub, sample_of_step,
            self.cfg.cfl, self.cfg.max_subcycles,
            series["rates"], series["gas"], series["water"], series["bhp"], delivered, totals)
        if status != _kernels.OK:
            raise SimulationFailure(_FAILURES.get(status, f"kernel status {status}"))
        times = np.array([(s + 1) * dt / DAY for s in np.flatnonzero(sample_of_step >= 0)])
        g_inj, g_prod, w_prod = (float(x) for x in totals)
        new.sim_time = state.sim_time + dt_days
        new.cum_gas_injected += g_inj
        new.cum_gas_produced += g_prod
        new.cum_brine_produced += w_prod
        if not (np.all(np.isfinite(new.pressure)) and np.all(np.isfinite(new.gas_volume))):
            raise FloatingPointError("non-finite reservoir state after interval")
        region = self.physics.leakage_region
        leak = float(new.gas_saturation[region].max()) if region.size else 0.0
        return new, WellSampleSeries(times, series["rates"], series["gas"], series["water"],
                                     series["bhp"], g_inj, g_prod, w_prod, leak, delivered)
