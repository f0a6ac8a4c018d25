"""Weather/occupancy CSV ingestion and the synthetic summer scenario.

CSV schema, one row per plant sample::

    timestamp, ambient_temp, solar_rad | solar_rad_<wall>..., occupancy_<zone>...[, equipment_<zone>...]

``timestamp`` is ISO-8601; ``ambient_temp`` in degC; either a single
``solar_rad`` column (W/m2, shared by every wall) or one column per wall;
one integer head-count column per zone; optionally one equipment heat-gain
column (W) per zone.
"""
from __future__ import annotations

import csv
from datetime import datetime, timedelta
from importlib import resources

import numpy as np

from .building import BuildingTopology, ConfigError, Disturbance, load_topology

STEPS_PER_DAY = 288
DT = 300.0


def read_weather_csv(path, topo: BuildingTopology, **disturbance_kw):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        occ_cols = [f"occupancy_{z.name}" for z in topo.zones]
        missing = [c for c in ["timestamp", "ambient_temp", *occ_cols] if c not in cols]
        if missing:
            raise ConfigError(f"weather file lacks columns {missing}")
        wall_cols = [f"solar_rad_{w.name}" for w in topo.walls]
        per_wall = all(c in cols for c in wall_cols)
        if not per_wall and "solar_rad" not in cols:
            raise ConfigError("weather file needs solar_rad or one solar_rad_<wall> column per wall")
        eq_cols = [f"equipment_{z.name}" for z in topo.zones]
        has_eq = all(c in cols for c in eq_cols)
        stamps, amb, sol, occ, eq = [], [], [], [], []
        for row in reader:
            stamps.append(datetime.fromisoformat(row["timestamp"]))
            amb.append(float(row["ambient_temp"]))
            sol.append([float(row[c]) for c in wall_cols] if per_wall else float(row["solar_rad"]))
            occ.append([int(row[c]) for c in occ_cols])
            if has_eq:
                eq.append([float(row[c]) for c in eq_cols])
    if len(stamps) < 2:
        raise ConfigError("weather file needs at least two rows")
    steps = np.diff([s.timestamp() for s in stamps])
    if not np.allclose(steps, steps[0]):
        raise ConfigError("weather rows are not evenly spaced")
    disturbance_kw.setdefault("equipment", np.array(eq) if has_eq else None)
    dist = Disturbance(np.array(amb), np.array(sol), np.array(occ, dtype=int), **disturbance_kw)
    return dist, float(steps[0])


def write_weather_csv(path, dist: Disturbance, topo: BuildingTopology, start="2023-07-01T00:00:00", dt=DT):
    t0 = datetime.fromisoformat(start)
    per_wall = dist.solar.ndim == 2
    head = ["timestamp", "ambient_temp"]
    head += [f"solar_rad_{w.name}" for w in topo.walls] if per_wall else ["solar_rad"]
    head += [f"occupancy_{z.name}" for z in topo.zones]
    if dist.equipment is not None:
        head += [f"equipment_{z.name}" for z in topo.zones]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for k in range(len(dist)):
            sol = [f"{v:.2f}" for v in dist.solar[k]] if per_wall else [f"{dist.solar[k]:.2f}"]
            w.writerow([(t0 + timedelta(seconds=dt * k)).isoformat(), f"{dist.ambient[k]:.3f}", *sol,
                        *[str(int(o)) for o in dist.occupancy[k]],
                        *([] if dist.equipment is None else [f"{v:.1f}" for v in dist.equipment[k]])])


def synthetic_weather(days=30, n_zones=4, seed=7, min_occupancy=1, max_occupancy=8, jump=0.1,
                      equipment_power=(600.0, 900.0), equipment_on=0.03, equipment_off=0.15):
    """Hot-summer diurnal ambient, clear-sky solar arcs, office-like occupancy and equipment loads.

    Equipment in each zone switches on during working hours with probability
    ``equipment_on`` per sample and off with ``equipment_off``; each switch-on
    draws its power uniformly from ``equipment_power``.
    """
    rng = np.random.default_rng(seed)
    n = days * STEPS_PER_DAY
    hours = (np.arange(n) % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    day = np.arange(n) // STEPS_PER_DAY
    daily_mean = 29.0 + np.convolve(rng.normal(0, 1.6, days + 2), np.ones(3) / 3, mode="valid")
    daily_amp = rng.uniform(5.5, 7.5, days)
    noise = np.zeros(n)
    for k in range(1, n):
        noise[k] = 0.98 * noise[k - 1] + rng.normal(0, 0.08)
    ambient = daily_mean[day] + daily_amp[day] * np.sin(2 * np.pi * (hours - 9.0) / 24.0) + noise
    clear = rng.uniform(0.7, 1.0, days)
    arc = np.clip(np.sin(np.pi * (hours - 6.0) / 14.0), 0.0, None)
    solar = 320.0 * clear[day] * arc
    # occupancy: per-zone jump process; at each sample the head count is redrawn
    # from the time-of-day range with probability ``jump``
    lo = np.where((hours >= 8) & (hours < 18), min_occupancy, np.where((hours >= 18) & (hours < 22), 1, 1))
    hi = np.where((hours >= 8) & (hours < 18), max_occupancy, np.where((hours >= 18) & (hours < 22), 4, 2))
    occ = np.empty((n, n_zones), dtype=int)
    occ[0] = rng.integers(lo[0], hi[0] + 1, size=n_zones)
    for k in range(1, n):
        redraw = rng.random(n_zones) < jump
        fresh = rng.integers(lo[k], hi[k] + 1, size=n_zones)
        occ[k] = np.where(redraw, fresh, np.clip(occ[k - 1], lo[k], hi[k]))
    working = (hours >= 8) & (hours < 18)
    equip = np.zeros((n, n_zones))
    level = np.zeros(n_zones)
    for k in range(n):
        on = level > 0
        start = ~on & working[k] & (rng.random(n_zones) < equipment_on)
        stop = on & (~working[k] | (rng.random(n_zones) < equipment_off))
        level = np.where(start, rng.uniform(*equipment_power, size=n_zones), np.where(stop, 0.0, level))
        equip[k] = level
    return Disturbance(ambient, solar, np.clip(occ, min_occupancy, max_occupancy),
                       min_occupancy=min_occupancy, max_occupancy=max_occupancy, equipment=equip)


def shipped_paths():
    """Paths of the building config and 30-day weather file bundled with the package."""
    base = resources.files("enchvac") / "data"
    return base / "building.json", base / "weather.csv"


def shipped_policy_path(name):
    """Bundled trained trigger policy, ``learned`` or ``entropy``."""
    return resources.files("enchvac") / "data" / f"policy_{name}.bin"


def load_shipped():
    bpath, wpath = shipped_paths()
    topo = load_topology(bpath)
    dist, dt = read_weather_csv(wpath, topo)
    return topo, dist, dt
