"""Trigger problem small enough to solve exactly.

Scalar state ``x`` in five bins ``{-2..2}``, true dynamics ``x+ = clip(x + u + 1)``.
The planner ignores the drift and steps toward zero with inputs in ``[-1, 1]``,
so plans from ``y = 2`` and ``y = 1`` differ beyond their first entry and the
last sent state matters while holding. Stage cost ``x^2 + lam * a``, terminal ``x^2``.
"""
import itertools

import numpy as np
import pytest

from enchvac.learning import EpisodeBatch, LearnerConfig, MLPPolicy, train
from enchvac.trigger import StoredPlan, TriggerState, advance, apply_override, select_input

HORIZON, T_S = 6, 3
BINS = range(-2, 3)


def plan_inputs(y):
    z, out = y, []
    for _ in range(T_S):
        v = -float(np.clip(z, -1, 1))
        out.append(v)
        z += v
    return out


PLANS = {y: np.array(plan_inputs(y)) for y in BINS}


def move(x, u):
    return np.clip(x + u + 1, -2, 2)


def backward_induction(lam):
    """Optimal cost-to-go from every ``(x, y, l)`` at time 0."""
    value = {(x, y, l): float(x * x) for x in BINS for y in BINS for l in range(1, T_S + 1)}
    for _ in range(HORIZON):
        nxt = {}
        for x, y, l in value:
            best = np.inf
            for a in ([1] if l >= T_S else [0, 1]):
                u = PLANS[x][0] if a else PLANS[y][l]
                key = (int(move(x, u)), x if a else y, 1 if a else l + 1)
                best = min(best, x * x + lam * a + value[key])
            nxt[(x, y, l)] = best
        value = nxt
    return value


def dp_start_values(lam):
    v = backward_induction(lam)
    return {x: v[(x, x, T_S)] for x in BINS}


def rollout_cost(x0, choose, lam):
    """Episode cost through the trigger primitives; ``choose(t, state)`` is the policy's wish."""
    s = TriggerState.initial([float(x0)], T_S)
    plan, total = None, 0.0
    for t in range(HORIZON):
        a = int(apply_override([choose(t, s)], [s.l], T_S)[0])
        fresh = StoredPlan(PLANS[int(s.x[0])][:, None]) if a else None
        u, plan = select_input(s, a, plan, fresh)
        total += s.x[0] ** 2 + lam * a
        s = advance(s, a, [move(s.x[0], u[0])])
    return total + s.x[0] ** 2


def enumerate_optimum(x0, lam):
    return min(rollout_cost(x0, lambda t, s, seq=seq: seq[t], lam)
               for seq in itertools.product((0, 1), repeat=HORIZON))


class ToyEnv:
    """Vectorized rollouts; features are ``(x, y, l, t)`` since the finite-horizon optimum is time-varying."""

    n_features = 4

    def __init__(self, lam):
        self.lam = lam
        self.table = np.array([PLANS[y] for y in BINS])

    def rollout(self, policy, rng, n):
        x = rng.integers(-2, 3, n).astype(float)
        y, l = x.copy(), np.full(n, T_S)
        feats, acts, forced, costs = [], [], [], []
        for t in range(HORIZON):
            f = np.column_stack([x, y, l, np.full(n, t)])
            a = apply_override(policy.act(f, rng), l, T_S)
            feats.append(f)
            acts.append(a)
            forced.append(l >= T_S)
            costs.append(x ** 2 + self.lam * a)
            held = self.table[y.astype(int) + 2, np.minimum(l, T_S - 1)]
            u = np.where(a == 1, self.table[x.astype(int) + 2, 0], held)
            y = np.where(a == 1, x, y)
            l = np.where(a == 1, 1, l + 1)
            x = move(x, u)
        return EpisodeBatch(np.stack(feats, 1), np.stack(acts, 1), np.stack(forced, 1).astype(int),
                            np.stack(costs, 1), x ** 2)


def learned_and_optimal(lam, iterations=1000, seed=0):
    pol = MLPPolicy(4, hidden=16, center=np.array([0.0, 0.0, 2.0, 2.5]), scale=np.array([2.0, 2.0, 1.0, 2.5]),
                    seed=seed)
    cfg = LearnerConfig(learning_rate=0.05, iterations=iterations, batch_size=64, baseline=True, seed=seed,
                        max_grad_norm=1.0)
    pol, _ = train(pol, ToyEnv(lam), cfg)
    greedy = lambda t, s: int(pol.act(np.array([[s.x[0], s.y[0], s.l, t]]))[0])
    learned = np.mean([rollout_cost(x0, greedy, lam) for x0 in BINS])
    return learned, np.mean(list(dp_start_values(lam).values()))


def test_last_sent_state_matters():
    assert PLANS[2][1] != PLANS[1][1]
    v = backward_induction(1.0)
    assert v[(1, 2, 1)] != v[(1, 1, 1)]


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 3.0, 8.0])
def test_backward_induction_matches_enumeration(lam):
    dp = dp_start_values(lam)
    for x0 in BINS:
        assert dp[x0] == pytest.approx(enumerate_optimum(x0, lam), abs=1e-9)


def test_env_matches_primitives():
    rng = np.random.default_rng(0)

    class Fixed:
        def act(self, X, rng=None):
            return ((X[:, 0] >= 1) & (X[:, 3] < 4)).astype(int)

    batch = ToyEnv(1.0).rollout(Fixed(), rng, 20)
    choose = lambda t, s: int(s.x[0] >= 1 and t < 4)
    for e in range(20):
        x0 = int(batch.features[e, 0, 0])
        assert batch.episode_costs[e] == pytest.approx(rollout_cost(x0, choose, 1.0))


@pytest.mark.parametrize("lam", [1.0, 2.0, 3.0])
def test_learned_policy_near_dp_optimum(lam):
    learned, optimum = learned_and_optimal(lam)
    assert learned <= 1.05 * optimum
