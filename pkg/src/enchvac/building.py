"""RC thermal network and CO2 mass balance for a multi-zone building.

State ordering follows the stacked vector used throughout the package:
``x = [zone temps (nz), wall temps (nw), zone CO2 (nz)]``.

Units: temperatures in degC, resistances K/W, capacities J/K, gains W,
solar irradiance W/m2, CO2 in ppm, CO2 generation in ppm*m3/s (a volumetric
rate of 1 L/s equals 1000 ppm*m3/s), mass flow in kg/s.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag, expm

SINGULAR_TOL = 1e-6


class ConfigError(ValueError):
    """Raised for inconsistent building or experiment configuration."""


class StabilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Zone:
    name: str
    volume: float
    capacity: float
    supply_temp: float = 14.0
    base_gain: float = 200.0


@dataclass(frozen=True)
class Wall:
    name: str
    resistance: float
    r_in: float
    r_out: float
    capacity: float
    area: float
    absorptivity: float = 0.0
    external: bool = False


@dataclass(frozen=True)
class BuildingTopology:
    zones: tuple
    walls: tuple
    adjacency: tuple  # adjacency[j] = indices of zones touching wall j
    specific_heat_air: float = 1005.0
    outdoor_co2: float = 400.0
    max_flow: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "zones", tuple(self.zones))
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "adjacency", tuple(tuple(int(i) for i in a) for a in self.adjacency))
        self.validate()

    @property
    def n_zones(self):
        return len(self.zones)

    @property
    def n_walls(self):
        return len(self.walls)

    @property
    def n_thermal(self):
        return self.n_zones + self.n_walls

    @property
    def n_state(self):
        return self.n_thermal + self.n_zones

    @property
    def volumes(self):
        return np.array([z.volume for z in self.zones])

    @property
    def supply_temps(self):
        return np.array([z.supply_temp for z in self.zones])

    def zone_walls(self, i):
        """The wall set of zone ``i`` (its side of the adjacency relation)."""
        return tuple(j for j, adj in enumerate(self.adjacency) if i in adj)

    def validate(self):
        if not self.zones:
            raise ConfigError("at least one zone is required")
        if len(self.adjacency) != len(self.walls):
            raise ConfigError(f"adjacency lists {len(self.adjacency)} walls, topology has {len(self.walls)}")
        for z in self.zones:
            if min(z.volume, z.capacity) <= 0:
                raise ConfigError(f"zone {z.name}: volume and capacity must be positive")
        for w, adj in zip(self.walls, self.adjacency):
            if min(w.resistance, w.r_in, w.r_out, w.capacity, w.area) <= 0:
                raise ConfigError(f"wall {w.name}: resistances, capacity and area must be positive")
            if not adj:
                raise ConfigError(f"wall {w.name} touches no zone")
            if any(i < 0 or i >= len(self.zones) for i in adj):
                raise ConfigError(f"wall {w.name} references an unknown zone")
            if len(set(adj)) != len(adj):
                raise ConfigError(f"wall {w.name} lists a zone twice")
            if w.external and len(adj) != 1:
                raise ConfigError(f"external wall {w.name} must touch exactly one zone")
        if self.specific_heat_air <= 0 or self.max_flow <= 0:
            raise ConfigError("specific heat and max flow must be positive")


@dataclass(frozen=True)
class PlantState:
    zone_temps: np.ndarray
    wall_temps: np.ndarray
    zone_co2: np.ndarray

    def stacked(self):
        return np.concatenate([self.zone_temps, self.wall_temps, self.zone_co2], axis=-1)

    @classmethod
    def from_stacked(cls, x, topo: BuildingTopology):
        x = np.asarray(x, dtype=float)
        nz, nw = topo.n_zones, topo.n_walls
        if x.shape[-1] != topo.n_state:
            raise ConfigError(f"state has {x.shape[-1]} entries, expected {topo.n_state}")
        return cls(x[..., :nz], x[..., nz:nz + nw], x[..., nz + nw:])


@dataclass(frozen=True)
class ContinuousModel:
    """``dT/dt = A T + B u + E_amb T_o + E_solar Q_r + E_gain Q_h`` and ``dC/dt = A_c C + B_c u_c + E_co2 G``."""

    a_tem: np.ndarray
    b_tem: np.ndarray
    e_amb: np.ndarray
    e_solar: np.ndarray
    e_gain: np.ndarray
    a_co2: np.ndarray
    b_co2: np.ndarray
    e_co2: np.ndarray


@dataclass(frozen=True)
class LinearPlant:
    a_tem: np.ndarray
    b_tem: np.ndarray
    a_co2: np.ndarray
    b_co2: np.ndarray
    e_amb: np.ndarray
    e_solar: np.ndarray
    e_gain: np.ndarray
    e_co2: np.ndarray
    dt: float
    topology: BuildingTopology
    method: str = "euler"
    continuous: ContinuousModel | None = None

    @property
    def a(self):
        return block_diag(self.a_tem, self.a_co2)

    @property
    def b(self):
        return block_diag(self.b_tem, self.b_co2)


@dataclass(frozen=True)
class Disturbance:
    """Exogenous trajectories sampled at the plant period.

    ``solar`` is either one irradiance series shared by all walls or one
    column per wall. ``co2_gen_per_person`` is in ppm*m3/s. ``equipment``
    holds optional per-zone heat gains (W) on top of the occupant gains.
    """

    ambient: np.ndarray
    solar: np.ndarray
    occupancy: np.ndarray
    co2_gen_per_person: float = 5.0
    heat_per_person: float = 100.0
    max_occupancy: int = 8
    min_occupancy: int = 0
    equipment: np.ndarray | None = None

    def __post_init__(self):
        amb = np.asarray(self.ambient, dtype=float)
        occ = np.asarray(self.occupancy)
        sol = np.asarray(self.solar, dtype=float)
        object.__setattr__(self, "ambient", amb)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "solar", sol)
        if self.equipment is not None:
            eq = np.asarray(self.equipment, dtype=float)
            if eq.shape != occ.shape:
                raise ConfigError("equipment gains must match the occupancy shape")
            object.__setattr__(self, "equipment", eq)
        if occ.ndim != 2 or sol.shape[0] != amb.shape[0] or occ.shape[0] != amb.shape[0]:
            raise ConfigError("disturbance trajectories must share their length")
        if occ.size and (occ.min() < self.min_occupancy or occ.max() > self.max_occupancy):
            raise ConfigError("occupancy outside configured bounds")

    def __len__(self):
        return self.ambient.shape[0]

    def internal_gains(self, zones):
        base = np.array([z.base_gain for z in zones])
        gains = base + self.heat_per_person * self.occupancy
        return gains if self.equipment is None else gains + self.equipment

    def co2_generation(self):
        return self.co2_gen_per_person * self.occupancy

    def solar_per_wall(self, n_walls):
        if self.solar.ndim == 1:
            return np.repeat(self.solar[:, None], n_walls, axis=1)
        return self.solar


def build_continuous_model(topo: BuildingTopology) -> ContinuousModel:
    """Assemble the nodal heat balances of every wall and room, plus CO2 balances."""
    nz, nw = topo.n_zones, topo.n_walls
    n = nz + nw
    a = np.zeros((n, n))
    e_amb = np.zeros(n)
    e_solar = np.zeros((n, nw))
    for j, (w, adj) in enumerate(zip(topo.walls, topo.adjacency)):
        row = nz + j
        g_in = 1.0 / (w.r_in + w.resistance / 2)
        for i in adj:
            a[row, i] += g_in / w.capacity
            a[row, row] -= g_in / w.capacity
            a[i, row] += g_in / topo.zones[i].capacity
            a[i, i] -= g_in / topo.zones[i].capacity
        if w.external:
            g_out = 1.0 / (w.r_out + w.resistance / 2)
            a[row, row] -= g_out / w.capacity
            e_amb[row] = g_out / w.capacity
            e_solar[row, j] = w.absorptivity * w.area / w.capacity
    caps = np.array([z.capacity for z in topo.zones])
    b = np.zeros((n, nz))
    b[np.arange(nz), np.arange(nz)] = topo.specific_heat_air / caps
    e_gain = np.zeros((n, nz))
    e_gain[np.arange(nz), np.arange(nz)] = 1.0 / caps
    vols = topo.volumes
    return ContinuousModel(
        a_tem=a,
        b_tem=b,
        e_amb=e_amb,
        e_solar=e_solar,
        e_gain=e_gain,
        a_co2=np.zeros((nz, nz)),
        b_co2=np.eye(nz),
        e_co2=np.diag(1.0 / vols),
    )


def _zoh(a, inputs, dt):
    n = a.shape[0]
    m = inputs.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = a
    aug[:n, n:] = inputs
    phi = expm(aug * dt)
    return phi[:n, :n], phi[:n, n:]


def discretize(model: ContinuousModel, dt: float, topo: BuildingTopology, method="euler") -> LinearPlant:
    """Sample the continuous model at period ``dt`` seconds.

    ``euler`` gives ``A = I + dt*A_c, B = dt*B_c``; ``zoh`` holds inputs and
    disturbances constant over the period.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    e_amb = model.e_amb[:, None]
    if method == "euler":
        n = model.a_tem.shape[0]
        nc = model.a_co2.shape[0]
        a_tem = np.eye(n) + dt * model.a_tem
        a_co2 = np.eye(nc) + dt * model.a_co2
        maps = [dt * m for m in (model.b_tem, e_amb, model.e_solar, model.e_gain)]
        b_co2, e_co2 = dt * model.b_co2, dt * model.e_co2
    elif method == "zoh":
        cols = [model.b_tem, e_amb, model.e_solar, model.e_gain]
        a_tem, stacked = _zoh(model.a_tem, np.hstack(cols), dt)
        splits = np.cumsum([c.shape[1] for c in cols])[:-1]
        maps = np.split(stacked, splits, axis=1)
        a_co2, stacked = _zoh(model.a_co2, np.hstack([model.b_co2, model.e_co2]), dt)
        b_co2, e_co2 = np.split(stacked, [model.b_co2.shape[1]], axis=1)
    else:
        raise ValueError(f"unknown discretization method {method!r}")
    radius = max(np.max(np.abs(np.linalg.eigvals(a_tem))), np.max(np.abs(np.linalg.eigvals(a_co2))))
    if radius > 1 + 1e-9:
        warnings.warn(f"discrete plant has spectral radius {radius:.6f} > 1 at dt={dt}", StabilityWarning, stacklevel=2)
    b_tem, e_amb_d, e_solar, e_gain = maps
    return LinearPlant(a_tem, b_tem, a_co2, b_co2, e_amb_d[:, 0], e_solar, e_gain, e_co2, float(dt), topo, method,
                       model)


def thermal_input(topo, zone_temps, mass_flow):
    """``m * (T_a - T_r)``: the thermal input the flow actually delivers."""
    return mass_flow * (topo.supply_temps - zone_temps)


def co2_input(topo, zone_co2, mass_flow):
    return mass_flow / topo.volumes * (topo.outdoor_co2 - zone_co2)


def disturbance_terms(plant: LinearPlant, ambient, solar, gains, co2_gen):
    """Discrete additive disturbances ``(w_tem, w_c)``; arguments may carry a leading batch axis."""
    w_tem = (
        np.multiply.outer(np.asarray(ambient, dtype=float), plant.e_amb)
        + np.asarray(solar, dtype=float) @ plant.e_solar.T
        + np.asarray(gains, dtype=float) @ plant.e_gain.T
    )
    w_c = np.asarray(co2_gen, dtype=float) @ plant.e_co2.T
    return w_tem, w_c


def disturbance_rates(model: ContinuousModel, ambient, solar, gains, co2_gen):
    """Continuous-time disturbance rates (K/s and ppm/s) for the ODE integrator."""
    r_tem = (
        np.multiply.outer(np.asarray(ambient, dtype=float), model.e_amb)
        + np.asarray(solar, dtype=float) @ model.e_solar.T
        + np.asarray(gains, dtype=float) @ model.e_gain.T
    )
    r_c = np.asarray(co2_gen, dtype=float) @ model.e_co2.T
    return r_tem, r_c


def linear_step(plant: LinearPlant, x, mass_flow, w_tem, w_c):
    """One-step form ``x+ = A x + B (m * (T_a - T)) + w`` on stacked states (batch axis allowed).

    With ``m`` from ``feedback_linearize`` this is exactly the linear model
    the controller predicts with.
    """
    topo = plant.topology
    nz, nt = topo.n_zones, topo.n_thermal
    temps = x[..., :nt]
    co2 = x[..., nt:]
    u_tem = thermal_input(topo, temps[..., :nz], mass_flow)
    u_c = co2_input(topo, co2, mass_flow)
    nxt_t = temps @ plant.a_tem.T + u_tem @ plant.b_tem.T + w_tem
    nxt_c = co2 @ plant.a_co2.T + u_c @ plant.b_co2.T + w_c
    return np.concatenate([nxt_t, nxt_c], axis=-1)


def ode_step(plant: LinearPlant, x, mass_flow, r_tem, r_c, substeps=2):
    """Integrate the bilinear ODE over one sample with flow and disturbances held.

    Heat: classical RK4 with ``substeps`` steps. CO2: each zone is a scalar
    linear ODE, solved in closed form.
    """
    model = plant.continuous
    topo = plant.topology
    nz, nt = topo.n_zones, topo.n_thermal
    m = np.asarray(mass_flow, dtype=float)
    ta = topo.supply_temps
    bdiag = np.diagonal(model.b_tem[:nz])

    def rhs(t):
        drive = np.zeros_like(t)
        drive[..., :nz] = bdiag * m * (ta - t[..., :nz])
        return t @ model.a_tem.T + drive + r_tem

    temps = np.array(x[..., :nt], dtype=float)
    h = plant.dt / substeps
    for _ in range(substeps):
        k1 = rhs(temps)
        k2 = rhs(temps + 0.5 * h * k1)
        k3 = rhs(temps + 0.5 * h * k2)
        k4 = rhs(temps + h * k3)
        temps = temps + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    co2 = x[..., nt:]
    rate = m / topo.volumes
    # C+ = C + phi(rate) * (rate (C_o - C) + g), phi(r) = (1 - exp(-r dt)) / r, phi(0) = dt
    safe = np.where(rate > 0, rate, 1.0)
    phi = np.where(rate > 0, -np.expm1(-safe * plant.dt) / safe, plant.dt)
    co2 = co2 + phi * (rate * (topo.outdoor_co2 - co2) + r_c)
    return np.concatenate([temps, co2], axis=-1)


def step_plant(plant: LinearPlant, state: PlantState, mass_flow, dist: Disturbance, t: int,
               integrator="ode") -> PlantState:
    """Advance the nonlinear plant one sample under the disturbance at index ``t``.

    ``integrator="ode"`` integrates the continuous dynamics with the flow held
    over the sample; ``"linear"`` applies the one-step discrete form.
    """
    topo = plant.topology
    m = np.asarray(mass_flow, dtype=float)
    if np.any(m < 0):
        raise ValueError("mass flow must be non-negative")
    if state.zone_temps.shape[-1] != topo.n_zones or state.wall_temps.shape[-1] != topo.n_walls:
        raise ConfigError("state does not match the topology")
    gains = dist.internal_gains(topo.zones)[t]
    solar = dist.solar_per_wall(topo.n_walls)[t]
    args = (dist.ambient[t], solar, gains, dist.co2_generation()[t])
    if integrator == "ode":
        x = ode_step(plant, state.stacked(), m, *disturbance_rates(plant.continuous, *args))
    elif integrator == "linear":
        x = linear_step(plant, state.stacked(), m, *disturbance_terms(plant, *args))
    else:
        raise ValueError(f"unknown integrator {integrator!r}")
    return PlantState.from_stacked(x, topo)


@dataclass(frozen=True)
class LinearizationResult:
    thermal_flow: np.ndarray
    co2_flow: np.ndarray
    singular: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def feedback_linearize(topo: BuildingTopology, zone_temps, zone_co2, u_tem, u_c, max_flow=None):
    """Invert ``u_tem = m (T_a - T_r)`` and ``u_c = (m / V)(C_o - C)`` per zone.

    Flows are clamped to ``[0, max_flow]``. A zone whose denominator is below
    ``SINGULAR_TOL`` gets ``max_flow`` and is flagged in ``singular``.
    """
    m_max = topo.max_flow if max_flow is None else max_flow
    den_t = topo.supply_temps - np.asarray(zone_temps, dtype=float)
    den_c = topo.outdoor_co2 - np.asarray(zone_co2, dtype=float)
    sing_t = np.abs(den_t) < SINGULAR_TOL
    sing_c = np.abs(den_c) < SINGULAR_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        m_t = np.where(sing_t, m_max, np.asarray(u_tem, dtype=float) / np.where(sing_t, 1.0, den_t))
        m_c = np.where(sing_c, m_max, topo.volumes * np.asarray(u_c, dtype=float) / np.where(sing_c, 1.0, den_c))
    return LinearizationResult(np.clip(m_t, 0.0, m_max), np.clip(m_c, 0.0, m_max), sing_t | sing_c)


# ---------------------------------------------------------------- configuration

def topology_from_dict(cfg: dict) -> BuildingTopology:
    """Build a topology from the JSON schema documented in the README."""
    try:
        zones = [Zone(z["name"], float(z["volume"]), float(z["capacity"]),
                      float(z.get("supply_temp", 14.0)), float(z.get("base_gain", 200.0)))
                 for z in cfg["zones"]]
        walls = [Wall(w["name"], float(w["resistance"]), float(w["r_in"]), float(w["r_out"]),
                      float(w["capacity"]), float(w["area"]), float(w.get("absorptivity", 0.0)),
                      bool(w.get("external", False)))
                 for w in cfg["walls"]]
    except KeyError as exc:
        raise ConfigError(f"missing field {exc}") from None
    zone_ix = {z.name: i for i, z in enumerate(zones)}
    wall_ix = {w.name: j for j, w in enumerate(walls)}
    adjacency = [[] for _ in walls]
    for entry in cfg["adjacency"]:
        if entry["wall"] not in wall_ix:
            raise ConfigError(f"adjacency names unknown wall {entry['wall']}")
        for zname in entry["zones"]:
            if zname not in zone_ix:
                raise ConfigError(f"adjacency names unknown zone {zname}")
            adjacency[wall_ix[entry["wall"]]].append(zone_ix[zname])
    topo = BuildingTopology(
        zones, walls, adjacency,
        specific_heat_air=float(cfg.get("specific_heat_air", 1005.0)),
        outdoor_co2=float(cfg.get("outdoor_co2", 400.0)),
        max_flow=float(cfg.get("max_flow", 0.6)),
    )
    # optional zone-side wall lists must mirror the wall-side adjacency
    for i, z in enumerate(cfg["zones"]):
        if "walls" in z:
            listed = sorted(wall_ix[w] for w in z["walls"])
            if listed != sorted(topo.zone_walls(i)):
                raise ConfigError(f"zone {z['name']} wall list disagrees with adjacency")
    return topo


def topology_to_dict(topo: BuildingTopology) -> dict:
    return {
        "zones": [dict(name=z.name, volume=z.volume, capacity=z.capacity,
                       supply_temp=z.supply_temp, base_gain=z.base_gain) for z in topo.zones],
        "walls": [dict(name=w.name, resistance=w.resistance, r_in=w.r_in, r_out=w.r_out,
                       capacity=w.capacity, area=w.area, absorptivity=w.absorptivity,
                       external=w.external) for w in topo.walls],
        "adjacency": [dict(wall=topo.walls[j].name, zones=[topo.zones[i].name for i in adj])
                      for j, adj in enumerate(topo.adjacency)],
        "specific_heat_air": topo.specific_heat_air,
        "outdoor_co2": topo.outdoor_co2,
        "max_flow": topo.max_flow,
    }


def load_topology(path) -> BuildingTopology:
    with open(path) as fh:
        return topology_from_dict(json.load(fh))


def four_zone_topology() -> BuildingTopology:
    """Synthetic single-storey 2x2 layout, 360 m2 split into four 90 m2 zones.

    Parameter values are plausible but invented; each zone has one lumped
    envelope node (facade, windows, roof share) and shares one internal wall
    with each of its two neighbours.
    """
    side = np.sqrt(90.0)
    height = 3.0
    volume = 90.0 * height
    zones = [Zone(f"zone{i + 1}", volume, volume * 1.2 * 1005.0 * 2.0) for i in range(4)]
    ext_area = 2 * side * height
    int_area = side * height
    h_in, h_out = 3.0, 15.0
    walls = []
    for i in range(4):
        walls.append(Wall(f"ext{i + 1}", 1.0 / (1.0 * ext_area), 1.0 / (h_in * ext_area),
                          1.0 / (h_out * ext_area), 150e3 * ext_area, ext_area, 0.4, True))
    pairs = [(0, 1), (2, 3), (0, 2), (1, 3)]
    for a, b in pairs:
        walls.append(Wall(f"int{a + 1}{b + 1}", 1.0 / (2.0 * int_area), 1.0 / (h_in * int_area),
                          1.0 / (h_in * int_area), 60e3 * int_area, int_area, 0.0, False))
    adjacency = [(i,) for i in range(4)] + pairs
    return BuildingTopology(zones, walls, adjacency)
