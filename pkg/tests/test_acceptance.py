"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line in the terminal summary."""
import math
import time

import numpy as np
import pytest

from enchvac import ckks
from enchvac.building import (
    build_continuous_model,
    co2_input,
    discretize,
    disturbance_rates,
    feedback_linearize,
    four_zone_topology,
    ode_step,
    thermal_input,
)
from enchvac.harness import (
    ExperimentConfig,
    PolicyRule,
    Setup,
    ThresholdRule,
    calibrate_threshold,
    compute_metrics,
    data_size_comparison,
    encrypted_bytes_per_trigger,
    run_closed_loop,
    simulate,
)
from enchvac.learning import EpisodeBatch, LinearPolicy, entropy_of, entropy_regularized_gradient, load_policy
from enchvac.mpc import MpcProblem, condense, fgm_solve, projected_gradient
from enchvac.protocol import run_encrypted_fgm, setup_protocol
from enchvac.scenario import shipped_policy_path
from enchvac.trigger import StoredPlan, TriggerState, advance, apply_override, select_input
from test_building import DT, _oracle_rhs, _rk4
from test_dp_toy import BINS, dp_start_values, enumerate_optimum, learned_and_optimal

pytestmark = pytest.mark.acceptance


def random_qp(rng, max_state=8, max_horizon=7, box=1.0):
    n = int(rng.integers(2, max_state + 1))
    m = int(rng.integers(1, 4))
    t = int(rng.integers(1, max_horizon + 1))
    a = rng.normal(0, 0.9 / np.sqrt(n), (n, n))
    p = MpcProblem(a, rng.normal(size=(n, m)), np.diag(rng.uniform(0.5, 2, n)), np.diag(rng.uniform(0.1, 1, m)),
                   rng.normal(0, 0.5, n), t, rng.normal(0, 0.05, (t, n)), -box, box)
    return condense(p), n


def _ratio(a, b):
    return a / b if b else math.inf


def load_shipped(name):
    policy, _ = load_policy(shipped_policy_path(name).read_bytes())
    return policy


@pytest.fixture(scope="module")
def scenario():
    return Setup(ExperimentConfig())


@pytest.fixture(scope="module")
def learned_run(scenario):
    policy = load_shipped("learned")
    trace, metrics = run_closed_loop(ExperimentConfig(), scenario, PolicyRule(policy))
    return policy, trace, metrics


# ---------------------------------------------------------------- 1


def test_criterion_1_homomorphisms(report):
    params = ckks.HeParams()
    assert (params.ring_degree, params.coeff_modulus_bits, params.scale) == (8192, (40, 26, 26, 26, 40), 2.0 ** 26)
    sk, pk, ek = ckks.keygen(params, seed=1)
    rng = np.random.default_rng(1)
    add_err = mul_err = 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        n = int(rng.integers(1, params.slots + 1))
        a, b = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
        ca, cb = ckks.encrypt_values(pk, a, rng=rng), ckks.encrypt_values(pk, b, rng=rng)
        add_err = max(add_err, np.max(np.abs(ckks.decrypt_values(sk, ckks.he_add(ca, cb), n) - (a + b))))
        prod = ckks.rescale(ckks.he_mult(ca, cb, ek))
        mul_err = max(mul_err, np.max(np.abs(ckks.decrypt_values(sk, prod, n) - a * b)))
    elapsed = time.perf_counter() - t0
    ok = add_err < 1e-3 and mul_err < 1e-2 and elapsed <= 300
    report(1, ok, f"max add err {add_err:.2e}, max mult err {mul_err:.2e}, {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_encrypted_matches_plaintext_fgm(report):
    params = ckks.HeParams()
    keys = ckks.keygen(params, seed=2)
    rng = np.random.default_rng(2)
    worst = 0.0
    t0 = time.perf_counter()
    for i in range(50):
        qp, n = random_qp(rng)
        cc, sc = setup_protocol(qp, params, seed=100 + i, keys=keys)
        x0 = rng.normal(size=n)
        u0 = rng.uniform(qp.lower, qp.upper)
        for k in (1, 3, 5):
            _, transcript, u = run_encrypted_fgm(cc, sc, x0, u0, k)
            assert len(transcript.messages) == 2 * k + 2
            worst = max(worst, np.max(np.abs(u - fgm_solve(qp, x0, u0, k))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 5e-2 and elapsed <= 600
    report(2, ok, f"max |enc - plain| {worst:.2e} over 150 runs, {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_fgm_matches_oracle(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        qp, n = random_qp(rng, box=0.3)
        x0 = rng.normal(0, 2, n)
        fast = fgm_solve(qp, x0, np.zeros(qp.size), 500)
        ref = projected_gradient(qp, x0, np.zeros(qp.size), 50_000)
        worst = max(worst, abs(qp.objective(fast, x0) - qp.objective(ref, x0)))
    ok = worst < 1e-5
    report(3, ok, f"max objective gap {worst:.2e} on 100 QPs")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_trigger_invariants(report):
    rng = np.random.default_rng(4)
    violations = transitions = 0
    while transitions < 100_000:
        t_s = int(rng.integers(1, 8))
        s = TriggerState.initial(rng.normal(size=2), t_s)
        plan, last_sent, sent_at = None, None, None
        for t in range(int(rng.integers(10, 200))):
            violations += not (1 <= s.l <= t_s)
            a = int(apply_override([rng.random() < 0.3], [s.l], t_s)[0])
            violations += s.l >= t_s and a != 1
            fresh = StoredPlan(rng.normal(size=(t_s, 2))) if a else None
            u, plan = select_input(s, a, plan, fresh)
            if a:
                last_sent, sent_at = s.x.copy(), t
                violations += not np.array_equal(u, fresh.u[0])
            else:
                violations += not np.array_equal(u, plan.u[t - sent_at])
            nxt = advance(s, a, rng.normal(size=2))
            violations += nxt.l != (1 if a else s.l + 1)
            violations += not np.array_equal(nxt.y, s.x if a else s.y)
            # induction: y is the last transmitted state and l counts samples since then
            violations += not (np.array_equal(nxt.y, last_sent) and nxt.l == t + 1 - sent_at)
            s = nxt
            transitions += 1
    ok = violations == 0
    report(4, ok, f"{violations} violations in {transitions} transitions")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_exact_dp_parity(report):
    gaps, ratios = [], []
    for lam in (0.5, 1.0, 2.0, 3.0):
        dp = dp_start_values(lam)
        gaps += [abs(dp[x0] - enumerate_optimum(x0, lam)) for x0 in BINS]
    for lam in (1.0, 2.0, 3.0):
        learned, optimum = learned_and_optimal(lam)
        ratios.append(learned / optimum)
    ok = max(gaps) <= 1e-9 and max(ratios) <= 1.05
    report(5, ok, f"DP vs enumeration gap {max(gaps):.1e}; learned/optimal {', '.join(f'{r:.3f}' for r in ratios)}")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_entropy_gradient(report):
    beta, theta = 1.0, -0.4
    pol = LinearPolicy(0, theta=np.array([theta]))
    p = pol.prob(np.zeros((1, 0)))[0]
    analytic = p * (1 - p) * (1 + beta * np.log(p / (1 - p)))
    rng = np.random.default_rng(6)
    with_c, without_c = [], []
    for _ in range(100):
        n = 1000
        a = (rng.random((n, 1)) < p).astype(int)
        batch = EpisodeBatch(np.zeros((n, 1, 0)), a, np.zeros_like(a), a.astype(float), np.zeros(n))
        with_c.append(entropy_regularized_gradient(pol, batch, beta)[0])
        without_c.append(entropy_regularized_gradient(pol, batch, beta, correction=False)[0])
    mean, se = np.mean(with_c), np.std(with_c, ddof=1) / 10
    mean_nc, se_nc = np.mean(without_c), np.std(without_c, ddof=1) / 10
    rel = abs(mean - analytic) / abs(analytic)
    z_nc = abs(mean_nc - analytic) / se_nc
    ok = rel <= 0.05 and z_nc > 3
    report(6, ok, f"analytic {analytic:.4f}, estimate {mean:.4f} ({100 * rel:.1f}%, se {se:.1e}); "
                  f"without correction {mean_nc:.4f} at {z_nc:.0f} se")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_learned_beats_threshold(report, scenario, learned_run):
    _, _, learned = learned_run
    alpha, _ = calibrate_threshold(scenario, learned.comm_rate / 100, tol=0.002)
    _, thresh = run_closed_loop(ExperimentConfig(trigger="threshold", alpha=alpha), scenario,
                                ThresholdRule(alpha, scenario.n))
    in_window = all(abs(r - 37.0) <= 2.0 for r in (learned.comm_rate, thresh.comm_rate))
    ok = in_window and learned.violation_pct_temp < thresh.violation_pct_temp
    ratio = _ratio(thresh.violation_pct_temp, learned.violation_pct_temp)
    max_ratio = _ratio(thresh.max_violation_temp, learned.max_violation_temp)
    report(7, ok, f"rates learned {learned.comm_rate:.1f}% / threshold(alpha={alpha:.2f}) {thresh.comm_rate:.1f}%; "
                  f"temp violations {learned.violation_pct_temp:.3f}% vs {thresh.violation_pct_temp:.3f}% "
                  f"(ratio {ratio:.1f}); max violation {learned.max_violation_temp:.3f} K vs "
                  f"{thresh.max_violation_temp:.3f} K (ratio {max_ratio:.1f})")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_communication_reduction(report, scenario, learned_run):
    policy, trace, learned = learned_run
    per_trigger = encrypted_bytes_per_trigger(scenario)
    summary, _ = data_size_comparison(scenario, trace, per_trigger)
    byte_cut = 1 - summary["event_over_periodic"]
    solve_cut = 1 - summary["solves_event"] / summary["solves_periodic"]
    # the per-trigger payload is what an encrypted closed loop actually exchanges
    cfg = ExperimentConfig(encrypted=True, start=96, duration=24)
    enc_trace, enc = run_closed_loop(cfg, scenario, PolicyRule(policy))
    proportional = enc.total_bytes == per_trigger * int(enc_trace.actions.sum())
    ok = learned.comm_rate <= 40 and byte_cut >= 0.6 and solve_cut >= 0.6 and proportional
    report(8, ok, f"comm rate {learned.comm_rate:.1f}%; bytes -{100 * byte_cut:.1f}%, encrypted solves "
                  f"-{100 * solve_cut:.1f}% vs encrypted periodic; {per_trigger} B per trigger "
                  f"({summary['encrypted_over_plain']:.0f}x plaintext)")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_randomized_policies(report, scenario, learned_run):
    policy, _, learned = learned_run
    rng = np.random.default_rng(9)
    feats = simulate(scenario, PolicyRule(policy), np.array([0, 3600]), 5000, np.random.default_rng(0),
                     keep_features=True).features.reshape(10_000, -1)
    a_star = policy.act(feats)
    freq_err = 0.0
    for eps in (0.1, 0.2, 0.5, 1.0):
        got = PolicyRule(policy, epsilon=eps).decide(feats, rng)
        freq_err = max(freq_err, abs(got.mean() - ((1 - eps) * a_star.mean() + eps / 2)))
    ent_policy = load_shipped("entropy")
    run = simulate(scenario, PolicyRule(ent_policy, stochastic=True), np.array([0]), len(scenario.dist),
                   np.random.default_rng(0), keep_features=True)
    ent = compute_metrics(run)
    decisions = ~run.forced[0]
    avg_entropy = float(entropy_of(ent_policy.prob(run.features[0][decisions])).mean())
    pairs = [(ent.violation_pct_temp, learned.violation_pct_temp), (ent.max_violation_temp, learned.max_violation_temp),
             (ent.violation_pct_co2, learned.violation_pct_co2), (ent.max_violation_co2, learned.max_violation_co2)]
    close = all(abs(e - d) <= 0.2 * d for e, d in pairs)
    ok = freq_err <= 0.02 and avg_entropy > 0 and close
    report(9, ok, f"max epsilon frequency error {freq_err:.3f}; entropy policy mean entropy {avg_entropy:.3f} nats, "
                  f"rate {ent.comm_rate:.1f}%; temp violations {ent.violation_pct_temp:.3f}% vs "
                  f"{learned.violation_pct_temp:.3f}%, max {ent.max_violation_temp:.3f} K vs "
                  f"{learned.max_violation_temp:.3f} K")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_plant_fidelity(report):
    topo = four_zone_topology()
    plant = discretize(build_continuous_model(topo), DT, topo)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        x = np.r_[rng.uniform(18, 30, topo.n_thermal), rng.uniform(400, 1500, 4)]
        m = rng.uniform(0, topo.max_flow, 4)
        amb, sol, gains, gen = rng.uniform(15, 38), rng.uniform(0, 500, topo.n_walls), rng.uniform(0, 2000, 4), \
            rng.uniform(0, 50, 4)
        ref = _rk4(lambda s: _oracle_rhs(topo, s, m, amb, sol, gains, gen), x, DT / 100, 100)
        got = ode_step(plant, x, m, *disturbance_rates(plant.continuous, amb, sol, gains, gen))
        worst = max(worst, np.max(np.abs(got - ref) / np.abs(ref)))
    fl_err = 0.0
    for _ in range(1000):
        temps, co2 = rng.uniform(16, 35, 4), rng.uniform(450, 2000, 4)
        mt, mc = rng.uniform(0, topo.max_flow, 4), rng.uniform(0, topo.max_flow, 4)
        u_t, u_c = thermal_input(topo, temps, mt), co2_input(topo, co2, mc)
        res = feedback_linearize(topo, temps, co2, u_t, u_c)
        assert not res.singular.any()
        fl_err = max(fl_err, np.max(np.abs(thermal_input(topo, temps, res.thermal_flow) - u_t)),
                     np.max(np.abs(co2_input(topo, co2, res.co2_flow) - u_c)))
    ok = worst <= 5e-3 and fl_err <= 1e-12
    report(10, ok, f"max relative plant error {worst:.2e}; linearization round trip {fl_err:.1e}")
    assert ok
