"""Closed-loop runner: nonlinear plant, two MPCs, trigger rule, optional encryption.

Episodes run as a batch along a leading axis so that policy training can
roll out many episodes at once; encrypted runs use a batch of one.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import ckks
from .building import (
    ConfigError,
    build_continuous_model,
    discretize,
    disturbance_rates,
    disturbance_terms,
    feedback_linearize,
    linear_step,
    load_topology,
    ode_step,
)
from .learning import EpisodeBatch, LearnerConfig, MLPPolicy, epsilon_randomize, load_policy, train
from .mpc import MpcProblem, arbitrate_flows, condense, disturbance_offset, fgm_solve, project_box, shift_plan
from .protocol import Scaling, run_encrypted_fgm, scaled_offset, setup_protocol
from .scenario import STEPS_PER_DAY, read_weather_csv, shipped_paths
from .trigger import TriggerConfig, advance_batch, forced_trigger, stage_cost, threshold_policy

TRIGGER_MODES = ("periodic", "threshold", "learned", "epsilon", "entropy")


@dataclass(frozen=True)
class ExperimentConfig:
    building: str | None = None
    weather: str | None = None
    t_ref: float = 23.5
    c_ref: float = 800.0
    band: tuple = (22.0, 25.0)
    co2_limit: float = 1000.0
    horizon: int = 7
    iterations: int = 1
    init_iterations: int = 200
    t_s: int = 7
    trigger: str = "periodic"
    alpha: float = math.inf
    lam: float = 0.0
    epsilon: float = 0.0
    beta: float = 0.0
    policy: str | None = None
    encrypted: bool = False
    he: dict = field(default_factory=dict)
    seed: int = 0
    start: int = 0
    duration: int | None = None
    discretization: str = "euler"
    plant_integrator: str = "ode"
    q_zone: float = 1.0
    q_wall: float = 0.01
    r_tem: float = 0.01
    q_co2: float = 1.0
    r_co2: float = 1000.0
    cost_q_temp: float = 1.0
    cost_q_co2: float = 1e-6
    cost_r_tem: float = 1e-3
    cost_r_co2: float = 1.0

    def __post_init__(self):
        if self.band[0] >= self.band[1]:
            raise ConfigError("comfort band lower bound must be below the upper bound")
        if self.trigger not in TRIGGER_MODES:
            raise ConfigError(f"trigger mode must be one of {TRIGGER_MODES}")
        if self.t_s > self.horizon:
            raise ConfigError(f"T_s={self.t_s} exceeds the MPC horizon {self.horizon}")
        if self.iterations < 1 or self.horizon < 1 or self.t_s < 1:
            raise ConfigError("iterations, horizon and T_s must be positive")
        for p in (self.building, self.weather, self.policy):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"file not found: {p}")
        if self.trigger in ("learned", "epsilon", "entropy") and self.policy is None:
            raise ConfigError(f"trigger mode {self.trigger} needs a policy file")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "band" in d:
            d["band"] = tuple(d["band"])
        if d.get("alpha") in ("inf", "Infinity", None):
            d["alpha"] = math.inf
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = asdict(self)
        d["band"] = list(self.band)
        if math.isinf(self.alpha):
            d["alpha"] = "inf"
        return d


def load_config_file(path):
    """Read an experiment JSON; optional ``training`` and ``sweep`` sections are returned separately."""
    with open(path) as fh:
        d = json.load(fh)
    extra = {k: d.pop(k) for k in ("training", "sweep") if k in d}
    base = Path(path).parent
    for key in ("building", "weather", "policy"):
        if d.get(key) is not None and not Path(d[key]).is_absolute():
            d[key] = str(base / d[key])
    return ExperimentConfig.from_dict(d), extra


# ---------------------------------------------------------------- setup


class Setup:
    """Plant, condensed MPC problems and precomputed disturbance tables for a config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        bpath, wpath = shipped_paths()
        self.topo = load_topology(cfg.building or bpath)
        self.dist, dt = read_weather_csv(cfg.weather or wpath, self.topo)
        self.plant = discretize(build_continuous_model(self.topo), dt, self.topo, cfg.discretization)
        topo, plant, dist = self.topo, self.plant, self.dist
        nz, nw = topo.n_zones, topo.n_walls
        self.nz, self.nt, self.n = nz, topo.n_thermal, topo.n_state
        gains = dist.internal_gains(topo.zones)
        args = (dist.ambient, dist.solar_per_wall(nw), gains, dist.co2_generation())
        self.w_tem, self.w_c = disturbance_terms(plant, *args)
        self.r_tem, self.r_c = disturbance_rates(plant.continuous, *args)
        self.steps_per_day = int(round(86400 / dt))
        self.mean_w_tem = self._daily_mean(self.w_tem)
        self.mean_w_c = self._daily_mean(self.w_c)
        t = cfg.horizon
        m_max = topo.max_flow
        q_t = np.diag(np.r_[np.full(nz, cfg.q_zone), np.full(nw, cfg.q_wall)])
        self.temp_problem = MpcProblem(
            plant.a_tem, plant.b_tem, q_t, cfg.r_tem * np.eye(nz), np.full(self.nt, cfg.t_ref), t,
            self.mean_w_tem[:t], m_max * (topo.supply_temps - cfg.t_ref), np.zeros(nz))
        self.co2_problem = MpcProblem(
            plant.a_co2, plant.b_co2, cfg.q_co2 * np.eye(nz), cfg.r_co2 * np.eye(nz), np.full(nz, cfg.c_ref), t,
            self.mean_w_c[:t], m_max / topo.volumes * (topo.outdoor_co2 - cfg.c_ref), np.zeros(nz))
        self.temp_qp = condense(self.temp_problem)
        self.co2_qp = condense(self.co2_problem)
        self.temp_offsets = self._offset_table(self.temp_problem, self.mean_w_tem)
        self.co2_offsets = self._offset_table(self.co2_problem, self.mean_w_c)
        zq = np.r_[np.full(nz, cfg.cost_q_temp), np.zeros(nw), np.full(nz, cfg.cost_q_co2)]
        self.trigger_cfg = TriggerConfig(
            cfg.lam, cfg.t_s, np.diag(zq), np.diag(np.r_[np.full(nz, cfg.cost_r_tem), np.full(nz, cfg.cost_r_co2)]),
            np.r_[np.full(self.nt, cfg.t_ref), np.full(nz, cfg.c_ref)], len(dist), cfg.horizon)
        self.temp_scaling = Scaling(np.full(self.nt, cfg.t_ref), np.full(self.nt, 5.0), 1.0)
        self.co2_scaling = Scaling(np.full(nz, cfg.c_ref), np.full(nz, 200.0), 0.1)

    def _daily_mean(self, w):
        spd = self.steps_per_day
        days = len(w) // spd
        if days < 1:
            return np.repeat(w.mean(axis=0, keepdims=True), spd, axis=0)
        return w[: days * spd].reshape(days, spd, -1).mean(axis=0)

    def _offset_table(self, problem, mean_w):
        spd = self.steps_per_day
        idx = (np.arange(spd)[:, None] + np.arange(problem.horizon)[None, :]) % spd
        return disturbance_offset(problem, mean_w[idx])

    @property
    def feature_center(self):
        nt, nz = self.nt, self.nz
        x = np.r_[np.full(nt, self.cfg.t_ref), np.full(nz, self.cfg.c_ref)]
        return np.r_[x, x, 0.0]

    @property
    def feature_scale(self):
        nt, nz = self.nt, self.nz
        x = np.r_[np.full(nt, 5.0), np.full(nz, 200.0)]
        return np.r_[x, x, float(self.cfg.t_s)]

    @property
    def n_features(self):
        return 2 * self.n + 1

    def initial_state(self):
        return np.r_[np.full(self.nt, self.cfg.t_ref), np.full(self.nz, 450.0)]

    @cached_property
    def he_params(self):
        return ckks.HeParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.cfg.he.items()})

    @cached_property
    def reference_run(self):
        """States and plans of a periodic run over the whole dataset, used to seed training episodes."""
        tr = simulate(self, PeriodicRule(), np.array([0]), len(self.dist), np.random.default_rng(0),
                      keep_states=True)
        return tr


# ---------------------------------------------------------------- trigger rules


class PeriodicRule:
    def decide(self, feats, rng):
        return np.ones(feats.shape[0], dtype=int)


class ThresholdRule:
    def __init__(self, alpha, n_state):
        self.alpha, self.n = alpha, n_state

    def decide(self, feats, rng):
        return threshold_policy(feats[:, : self.n], feats[:, self.n: 2 * self.n], self.alpha)


class PolicyRule:
    """Greedy or sampled learned policy, optionally wrapped by the epsilon randomizer."""

    def __init__(self, policy, stochastic=False, epsilon=0.0):
        self.policy, self.stochastic, self.epsilon = policy, stochastic, epsilon

    def decide(self, feats, rng):
        a = self.policy.act(feats, rng if self.stochastic else None)
        if self.epsilon > 0:
            a = epsilon_randomize(a, self.epsilon, rng)
        return a


def rule_from_config(cfg: ExperimentConfig, setup: Setup):
    if cfg.trigger == "periodic":
        return PeriodicRule()
    if cfg.trigger == "threshold":
        return ThresholdRule(cfg.alpha, setup.n)
    with open(cfg.policy, "rb") as fh:
        policy, _ = load_policy(fh.read())
    if cfg.trigger == "learned":
        return PolicyRule(policy)
    if cfg.trigger == "epsilon":
        return PolicyRule(policy, epsilon=cfg.epsilon)
    return PolicyRule(policy, stochastic=True)


# ---------------------------------------------------------------- closed loop


@dataclass
class EpisodeTrace:
    """Per-step record of a batch of episodes; arrays have a leading batch axis."""

    start: np.ndarray
    zone_temps: np.ndarray  # (B, H, nz) after each step
    zone_co2: np.ndarray
    actions: np.ndarray  # (B, H)
    forced: np.ndarray
    flows: np.ndarray  # (B, H, nz)
    costs: np.ndarray  # (B, H)
    terminal: np.ndarray  # (B,)
    bytes_sent: np.ndarray  # (B, H)
    features: np.ndarray | None = None
    states: np.ndarray | None = None  # (B, H+1, n)
    plans: np.ndarray | None = None  # (B, H, 2*T*nz)
    solve_time: float = 0.0
    solves: int = 0

    @property
    def length(self):
        return self.actions.shape[1]

    def to_batch(self):
        return EpisodeBatch(self.features, self.actions, self.forced, self.costs, self.terminal,
                            self.bytes_sent.sum(axis=1))


class _Solver:
    """Warm-started plaintext or encrypted FGM for both MPC problems."""

    def __init__(self, setup: Setup, encrypted=False, seed=0):
        self.s = setup
        self.k = setup.cfg.iterations
        self.encrypted = encrypted
        self.time = 0.0
        self.count = 0
        if encrypted:
            params = setup.he_params
            keys = ckks.keygen(params, seed=seed)
            self.temp_ctx = setup_protocol(setup.temp_qp, params, seed + 1, setup.temp_scaling, keys)
            self.co2_ctx = setup_protocol(setup.co2_qp, params, seed + 2, setup.co2_scaling, keys)

    def initial_plans(self, x, tod):
        s = self.s
        b = x.shape[0]
        zt = project_box(np.zeros((b, s.temp_qp.size)), s.temp_qp.lower, s.temp_qp.upper)
        zc = project_box(np.zeros((b, s.co2_qp.size)), s.co2_qp.lower, s.co2_qp.upper)
        it = s.cfg.init_iterations
        pt = fgm_solve(s.temp_qp, x[:, : s.nt], zt, it, offset=s.temp_offsets[tod])
        pc = fgm_solve(s.co2_qp, x[:, s.nt:], zc, it, offset=s.co2_offsets[tod])
        return pt, pc

    def solve(self, x, tod, warm_t, warm_c):
        """New plans and the bytes exchanged, for the rows of ``x``."""
        s = self.s
        t0 = time.perf_counter()
        warm_t = project_box(warm_t, s.temp_qp.lower, s.temp_qp.upper)
        warm_c = project_box(warm_c, s.co2_qp.lower, s.co2_qp.upper)
        if not self.encrypted:
            pt = fgm_solve(s.temp_qp, x[:, : s.nt], warm_t, self.k, offset=s.temp_offsets[tod])
            pc = fgm_solve(s.co2_qp, x[:, s.nt:], warm_c, self.k, offset=s.co2_offsets[tod])
            sent = np.full(x.shape[0], plaintext_bytes_per_trigger(s))
        else:
            pt, pc, sent = [], [], []
            for i in range(x.shape[0]):
                ut, nb_t = self._encrypted(self.temp_ctx, s.temp_qp, s.temp_scaling, x[i, : s.nt], warm_t[i],
                                           s.temp_offsets[tod[i]])
                uc, nb_c = self._encrypted(self.co2_ctx, s.co2_qp, s.co2_scaling, x[i, s.nt:], warm_c[i],
                                           s.co2_offsets[tod[i]])
                pt.append(ut)
                pc.append(uc)
                sent.append(nb_t + nb_c)
            pt, pc, sent = np.array(pt), np.array(pc), np.array(sent)
        self.time += time.perf_counter() - t0
        self.count += x.shape[0]
        return pt, pc, sent

    def _encrypted(self, ctx, qp, scaling, x, warm, offset):
        cc, sc = ctx
        _, transcript, u = run_encrypted_fgm(cc, sc, x, warm, self.k, offset=scaled_offset(qp, scaling, offset))
        # decrypted iterates can sit a hair outside the box; the actuator sees the projection
        return project_box(u, qp.lower, qp.upper), transcript.total_bytes


def plaintext_bytes_per_trigger(setup: Setup):
    """State uplink plus both plans downlink, float64 each."""
    return 8 * (setup.n + setup.temp_qp.size + setup.co2_qp.size)


def _shift_rows(plan, n_input, shifts):
    out = np.empty_like(plan)
    for s in np.unique(shifts):
        rows = shifts == s
        out[rows] = shift_plan(plan[rows], n_input, int(s))
    return out


def simulate(setup: Setup, rule, starts, length, rng, x0=None, encrypted=False, keep_features=False,
             keep_states=False, seed=0, plans0=None):
    """Run ``len(starts)`` episodes of ``length`` steps beginning at dataset indices ``starts``."""
    starts = np.asarray(starts, dtype=int)
    if np.any(starts + length > len(setup.dist)):
        raise ConfigError("episode runs past the end of the disturbance data")
    b = starts.size
    nz, nt, n = setup.nz, setup.nt, setup.n
    tcfg = setup.trigger_cfg
    t_s = tcfg.t_s
    T = setup.cfg.horizon
    spd = setup.steps_per_day
    x = np.tile(setup.initial_state(), (b, 1)) if x0 is None else np.array(x0, dtype=float).reshape(b, n)
    y = x.copy()
    l = np.full(b, t_s)
    solver = _Solver(setup, encrypted, seed)
    if plans0 is None:
        plan_t, plan_c = solver.initial_plans(x, starts % spd)
    else:
        plan_t, plan_c = (np.array(p, dtype=float).reshape(b, -1) for p in plans0)
    temps = np.empty((b, length, nz))
    co2 = np.empty((b, length, nz))
    acts = np.empty((b, length), dtype=int)
    forced_log = np.empty((b, length), dtype=bool)
    flows = np.empty((b, length, nz))
    costs = np.empty((b, length))
    sent = np.zeros((b, length))
    feats_log = np.empty((b, length, 2 * n + 1)) if keep_features else None
    states = np.empty((b, length + 1, n)) if keep_states else None
    plans = np.empty((b, length, 2 * T * nz)) if keep_states else None
    rows = np.arange(b)
    for k in range(length):
        t = starts + k
        tod = t % spd
        feats = np.hstack([x, y, l[:, None].astype(float)])
        forced = forced_trigger(l, t_s)
        a = (rule.decide(feats, rng).astype(bool) | forced).astype(int)
        trig = np.flatnonzero(a)
        if trig.size:
            wt = _shift_rows(plan_t[trig], nz, l[trig])
            wc = _shift_rows(plan_c[trig], nz, l[trig])
            nt_plan, nc_plan, nbytes = solver.solve(x[trig], tod[trig], wt, wc)
            plan_t[trig] = nt_plan
            plan_c[trig] = nc_plan
            sent[trig, k] = nbytes
        off = np.where(a == 1, 0, l)
        u_t = plan_t.reshape(b, T, nz)[rows, off]
        u_c = plan_c.reshape(b, T, nz)[rows, off]
        lin = feedback_linearize(setup.topo, x[:, :nz], x[:, nt:], u_t, u_c)
        m = arbitrate_flows(lin.thermal_flow, lin.co2_flow)
        costs[:, k] = stage_cost(x, np.hstack([u_t, u_c]), a, tcfg)
        if keep_features:
            feats_log[:, k] = feats
        if keep_states:
            states[:, k] = x
            plans[:, k] = np.hstack([plan_t, plan_c])
        if setup.cfg.plant_integrator == "ode":
            x_next = ode_step(setup.plant, x, m, setup.r_tem[t], setup.r_c[t])
        else:
            x_next = linear_step(setup.plant, x, m, setup.w_tem[t], setup.w_c[t])
        x, y, l = advance_batch(x, y, l, a, x_next)
        temps[:, k] = x[:, :nz]
        co2[:, k] = x[:, nt:]
        acts[:, k] = a
        forced_log[:, k] = forced
        flows[:, k] = m
    if keep_states:
        states[:, length] = x
    terminal = stage_cost(x, None, None, tcfg, terminal=True)
    return EpisodeTrace(starts, temps, co2, acts, forced_log, flows, costs, terminal, sent, feats_log, states,
                        plans, solver.time, solver.count)


class ClosedLoopEnv:
    """Training environment: episodes of ``length`` steps from random start times.

    Each episode starts from the state and plans of a periodic reference run
    at its start time, so short episodes see realistic conditions. With
    ``shared_start`` every episode of a batch begins at the same time, so the
    batch-mean baseline compares action sequences under identical weather.
    """

    def __init__(self, setup: Setup, length=STEPS_PER_DAY, stochastic=True, shared_start=False):
        self.setup = setup
        self.length = length
        self.stochastic = stochastic
        self.shared_start = shared_start

    @property
    def n_features(self):
        return self.setup.n_features

    def rollout(self, policy, rng, n_episodes):
        ref = self.setup.reference_run
        starts = rng.integers(0, len(self.setup.dist) - self.length, size=1 if self.shared_start else n_episodes)
        starts = np.resize(starts, n_episodes)
        x0 = ref.states[0, starts]
        plans = ref.plans[0, starts]
        half = plans.shape[1] // 2
        tr = simulate(self.setup, PolicyRule(policy, stochastic=self.stochastic), starts, self.length, rng,
                      x0=x0, keep_features=True, plans0=(plans[:, :half], plans[:, half:]))
        return tr.to_batch()


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class RunMetrics:
    violation_pct_temp: float
    violation_pct_co2: float
    max_violation_temp: float
    max_violation_co2: float
    comm_rate: float
    total_bytes: int
    mpc_solves: int
    wall_time_per_solve: float
    mean_cost: float

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


def compute_metrics(trace: EpisodeTrace, band=(22.0, 25.0), co2_limit=1000.0):
    """Metrics over every sample of every episode in the trace.

    A sample violates when any zone is outside the band (temperature) or above
    the limit (CO2); the max violation is the largest excursion over zones and time.
    """
    lo, hi = band
    temps = np.asarray(trace.zone_temps)
    dev_t = np.maximum(lo - temps, 0.0) + np.maximum(temps - hi, 0.0)
    dev_c = np.maximum(np.asarray(trace.zone_co2) - co2_limit, 0.0)
    samples = temps.shape[0] * temps.shape[1]
    solves = int(trace.solves)
    return RunMetrics(
        violation_pct_temp=100.0 * float(np.sum(np.any(dev_t > 0, axis=-1))) / samples,
        violation_pct_co2=100.0 * float(np.sum(np.any(dev_c > 0, axis=-1))) / samples,
        max_violation_temp=float(dev_t.max(initial=0.0)),
        max_violation_co2=float(dev_c.max(initial=0.0)),
        comm_rate=100.0 * float(np.mean(trace.actions)),
        total_bytes=int(np.sum(trace.bytes_sent)),
        mpc_solves=solves,
        wall_time_per_solve=trace.solve_time / solves if solves else 0.0,
        mean_cost=float(np.mean(trace.costs.sum(axis=1) + trace.terminal)),
    )


def run_closed_loop(cfg: ExperimentConfig, setup: Setup | None = None, rule=None):
    setup = setup or Setup(cfg)
    rule = rule or rule_from_config(cfg, setup)
    length = cfg.duration if cfg.duration is not None else len(setup.dist) - cfg.start
    rng = np.random.default_rng(cfg.seed)
    trace = simulate(setup, rule, np.array([cfg.start]), length, rng, encrypted=cfg.encrypted, seed=cfg.seed)
    return trace, compute_metrics(trace, cfg.band, cfg.co2_limit)


# ---------------------------------------------------------------- exports


def write_trace_csv(trace: EpisodeTrace, path, episode=0):
    nz = trace.zone_temps.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "trigger", "forced", "cost", "bytes",
                    *[f"temp_{i}" for i in range(nz)], *[f"co2_{i}" for i in range(nz)],
                    *[f"flow_{i}" for i in range(nz)]])
        for k in range(trace.length):
            w.writerow([int(trace.start[episode]) + k, int(trace.actions[episode, k]),
                        int(trace.forced[episode, k]), f"{trace.costs[episode, k]:.6g}",
                        int(trace.bytes_sent[episode, k]),
                        *[f"{v:.4f}" for v in trace.zone_temps[episode, k]],
                        *[f"{v:.2f}" for v in trace.zone_co2[episode, k]],
                        *[f"{v:.5f}" for v in trace.flows[episode, k]]])


def write_rows_csv(rows, path):
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- experiments


def encrypted_bytes_per_trigger(setup: Setup, seed=0):
    """Transcript bytes of one encrypted solve of both problems (fixed for given params and K)."""
    solver = _Solver(setup, encrypted=True, seed=seed)
    x = setup.initial_state()[None, :]
    tod = np.array([0])
    wt, wc = solver.initial_plans(x, tod)
    _, _, sent = solver.solve(x, tod, wt, wc)
    return int(sent[0])


def data_size_comparison(setup: Setup, event_trace: EpisodeTrace, per_trigger_enc=None):
    """Cumulative byte series for plaintext periodic, encrypted periodic and encrypted event-triggered.

    Payload per trigger is constant for fixed parameters, so the series are
    trigger counts times the per-trigger payload of one measured protocol run.
    """
    enc = per_trigger_enc if per_trigger_enc is not None else encrypted_bytes_per_trigger(setup)
    plain = plaintext_bytes_per_trigger(setup)
    h = event_trace.length
    steps = np.arange(1, h + 1)
    triggers = np.cumsum(event_trace.actions[0])
    series = {
        "plaintext_periodic": plain * steps,
        "encrypted_periodic": enc * steps,
        "encrypted_event": enc * triggers,
    }
    summary = {
        "bytes_per_trigger_plain": plain,
        "bytes_per_trigger_encrypted": enc,
        "encrypted_over_plain": enc / plain,
        "event_over_periodic": float(series["encrypted_event"][-1] / series["encrypted_periodic"][-1]),
        "solves_event": int(triggers[-1]),
        "solves_periodic": int(h),
    }
    rows = [{"step": int(k), **{name: int(v[k]) for name, v in series.items()}} for k in range(h)]
    return summary, rows


def calibrate_threshold(setup: Setup, target_rate, length=None, lo=0.0, hi=None, tol=0.005, max_iter=40):
    """Bisection on alpha for a target communication fraction (rate is non-increasing in alpha)."""
    length = length or len(setup.dist)
    hi = hi if hi is not None else 1000.0

    def rate(alpha):
        tr = simulate(setup, ThresholdRule(alpha, setup.n), np.array([0]), length, np.random.default_rng(0))
        return float(tr.actions.mean())

    best = (hi, rate(hi))
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - target_rate) < abs(best[1] - target_rate):
            best = (mid, r)
        if abs(r - target_rate) <= tol:
            break
        if r > target_rate:
            lo = mid
        else:
            hi = mid
    return best


@dataclass(frozen=True)
class TrainingOptions:
    """Policy architecture, episode shape and SGD settings for ``train_trigger``."""

    hidden: int = 100
    init_scale: float = 2.0
    policy_seed: int = 0
    episode_length: int = STEPS_PER_DAY
    shared_start: bool = True
    learner: LearnerConfig = field(default_factory=lambda: LearnerConfig(
        learning_rate=0.1, iterations=2000, batch_size=64, baseline=True, max_grad_norm=1.0))

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        fields = set(cls.__dataclass_fields__) - {"learner"}
        learner_keys = set(LearnerConfig.__dataclass_fields__)
        unknown = set(d) - fields - learner_keys
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}")
        learner = replace(cls().learner, **{k: d[k] for k in learner_keys & set(d)})
        return cls(learner=learner, **{k: d[k] for k in fields & set(d)})


def train_trigger(setup: Setup, opts: TrainingOptions | None = None, callback=None):
    """Train a trigger policy on plaintext closed-loop episodes; returns ``(policy, curve)``."""
    opts = opts or TrainingOptions()
    env = ClosedLoopEnv(setup, length=opts.episode_length, shared_start=opts.shared_start)
    policy = MLPPolicy(setup.n_features, hidden=opts.hidden, center=setup.feature_center,
                       scale=setup.feature_scale, seed=opts.policy_seed, init_scale=opts.init_scale)
    return train(policy, env, opts.learner, callback=callback)


def sweep(cfg: ExperimentConfig, parameter, values, opts: TrainingOptions | None = None, log=None):
    """One closed-loop run per value of ``alpha`` (threshold) or ``lam`` (re-trained policy)."""
    if parameter not in ("alpha", "lam"):
        raise ConfigError("sweep parameter must be alpha or lam")
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two values")
    rows = []
    setup = Setup(cfg) if parameter == "alpha" else None
    for v in values:
        if parameter == "alpha":
            run_cfg = replace(cfg, trigger="threshold", alpha=float(v))
            rule = ThresholdRule(float(v), setup.n)
            s = setup
        else:
            run_cfg = replace(cfg, lam=float(v))
            s = Setup(run_cfg)
            policy, _ = train_trigger(s, opts)
            rule = PolicyRule(policy)
        _, m = run_closed_loop(run_cfg, s, rule)
        row = {"parameter": parameter, "value": float(v), **asdict(m)}
        rows.append(row)
        if log is not None:
            log(row)
    return rows
