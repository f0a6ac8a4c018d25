"""Trigger policies and their training by score-function gradients.

A policy maps a raw feature row ``(x, y, l)`` to the probability of
transmitting. Training minimizes the expected episode cost, optionally minus
``beta`` times the summed per-step action entropy. Steps where the cap forces
a transmission are not policy decisions and carry no gradient or entropy.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

P_MIN = 1e-6
P_MAX = 1 - 1e-6


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def entropy_of(p):
    """Bernoulli entropy in nats."""
    p = np.clip(np.asarray(p, dtype=float), P_MIN, P_MAX)
    return -(p * np.log(p) + (1 - p) * np.log1p(-p))


def epsilon_randomize(a_star, epsilon, rng):
    """Keep ``a_star`` with probability ``1 - eps``, else draw a fair coin."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    a_star = np.asarray(a_star)
    explore = rng.random(a_star.shape) < epsilon
    coin = rng.random(a_star.shape) < 0.5
    return np.where(explore, coin, a_star.astype(bool)).astype(int)


class _Policy:
    """Shared plumbing: input normalization, clamped probabilities, flat parameters."""

    kind = ""

    def __init__(self, center, scale):
        self.center = np.asarray(center, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    def _norm(self, X):
        return (np.asarray(X, dtype=float) - self.center) / self.scale

    def logits(self, X):
        raise NotImplementedError

    def prob(self, X):
        return np.clip(_sigmoid(self.logits(X)), P_MIN, P_MAX)

    def _dp_dz(self, X):
        p = _sigmoid(self.logits(X))
        inside = (p > P_MIN) & (p < P_MAX)
        return np.where(inside, p * (1 - p), 0.0)

    def act(self, X, rng=None):
        """Greedy action when ``rng`` is None, else a sample."""
        p = self.prob(X)
        if rng is None:
            return (p > 0.5).astype(int)
        return (rng.random(p.shape) < p).astype(int)


class MLPPolicy(_Policy):
    """Two fully connected layers (tanh hidden units) and a sigmoid output."""

    kind = "mlp"

    def __init__(self, n_in, hidden=100, center=0.0, scale=1.0, seed=None, init_scale=None):
        super().__init__(np.broadcast_to(center, (n_in,)), np.broadcast_to(scale, (n_in,)))
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(n_in) if init_scale is None else init_scale
        self.w1 = rng.normal(0.0, s, size=(hidden, n_in))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=hidden) * 0.1
        self.b2 = np.zeros(1)

    @property
    def n_in(self):
        return self.w1.shape[1]

    def _hidden(self, X):
        return np.tanh(self._norm(X) @ self.w1.T + self.b1)

    def logits(self, X):
        return self._hidden(X) @ self.w2 + self.b2[0]

    def get_flat(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, self.b2])

    def set_flat(self, theta):
        h, d = self.w1.shape
        i = 0
        self.w1 = theta[i:i + h * d].reshape(h, d).copy()
        i += h * d
        self.b1 = theta[i:i + h].copy()
        i += h
        self.w2 = theta[i:i + h].copy()
        i += h
        self.b2 = theta[i:i + 1].copy()

    def vjp(self, X, weights):
        """``sum_s weights[s] * grad_theta p(X[s])`` as a flat vector."""
        xn = self._norm(X)
        hid = np.tanh(xn @ self.w1.T + self.b1)
        g_z = np.asarray(weights, dtype=float) * self._dp_dz(X)
        g_w2 = g_z @ hid
        g_b2 = np.array([g_z.sum()])
        g_h = np.outer(g_z, self.w2) * (1 - hid ** 2)
        return np.concatenate([(g_h.T @ xn).ravel(), g_h.sum(axis=0), g_w2, g_b2])


class LinearPolicy(_Policy):
    """Logistic policy ``sigmoid(w'x + b)``; with ``n_in = 0`` a single state-free logit."""

    kind = "linear"

    def __init__(self, n_in=0, center=0.0, scale=1.0, theta=None):
        super().__init__(np.broadcast_to(center, (n_in,)), np.broadcast_to(scale, (n_in,)))
        self.theta = np.zeros(n_in + 1) if theta is None else np.asarray(theta, dtype=float).copy()

    @property
    def n_in(self):
        return self.theta.size - 1

    def _design(self, X):
        X = np.asarray(X, dtype=float)
        if self.n_in == 0:
            return np.ones((X.shape[0], 1))
        return np.hstack([self._norm(X), np.ones((X.shape[0], 1))])

    def logits(self, X):
        return self._design(X) @ self.theta

    def get_flat(self):
        return self.theta.copy()

    def set_flat(self, theta):
        self.theta = np.asarray(theta, dtype=float).copy()

    def vjp(self, X, weights):
        return (np.asarray(weights, dtype=float) * self._dp_dz(X)) @ self._design(X)


# ---------------------------------------------------------------- traces and estimators

@dataclass
class EpisodeBatch:
    """Rollouts of equal length: per-step features, actions, forced flags, stage costs."""

    features: np.ndarray  # (E, H, d)
    actions: np.ndarray  # (E, H)
    forced: np.ndarray  # (E, H)
    costs: np.ndarray  # (E, H)
    terminal: np.ndarray  # (E,)
    bytes_sent: np.ndarray | None = None

    def __post_init__(self):
        if self.features.shape[0] == 0:
            raise ValueError("empty episode batch")
        if not (np.all(np.isfinite(self.costs)) and np.all(np.isfinite(self.terminal))):
            raise FloatingPointError("non-finite episode cost")

    @property
    def n_episodes(self):
        return self.features.shape[0]

    @property
    def episode_costs(self):
        return self.costs.sum(axis=1) + self.terminal

    @property
    def comm_rate(self):
        return float(self.actions.mean())

    def decision_mask(self):
        return ~self.forced.astype(bool)


@dataclass(frozen=True)
class LearnerConfig:
    beta: float = 0.0
    epsilon: float = 0.0
    learning_rate: float = 1e-3
    iterations: int = 200
    batch_size: int = 16
    baseline: bool = False
    seed: int = 0
    cost_scale: float = 1.0
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch size must be positive")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _score_weights(p, actions, mask):
    """Coefficient c with ``grad log pi(a) = c * grad p``."""
    c = np.where(actions == 1, 1.0 / p, -1.0 / (1 - p))
    return np.where(mask, c, 0.0)


def entropy_regularized_gradient(policy, batch: EpisodeBatch, beta, baseline=False, correction=True):
    """Gradient of ``E[sum_t c_t] - beta * E[sum_t J_t]`` from a batch of rollouts.

    Score term: ``mean_e (L_e - b) * sum_t grad log pi(a_t)`` with
    ``L_e = C_e - beta * sum_t J_t``. Correction term:
    ``beta * mean_e sum_t grad pi(1) log pi(1) + grad pi(0) log pi(0)``,
    which for a Bernoulli policy is ``beta * grad p * log(p / (1 - p))``.
    """
    e, h, d = batch.features.shape
    X = batch.features.reshape(e * h, d)
    mask = batch.decision_mask().reshape(-1)
    acts = batch.actions.reshape(-1)
    p = policy.prob(X)
    ent = np.where(mask, entropy_of(p), 0.0).reshape(e, h)
    returns = batch.episode_costs - beta * ent.sum(axis=1)
    if baseline:
        returns = returns - returns.mean()
    weight = _score_weights(p, acts, mask) * np.repeat(returns, h)
    if beta and correction:
        weight = weight + np.where(mask, beta * np.log(p / (1 - p)), 0.0)
    return policy.vjp(X, weight) / e


def reinforce_gradient(policy, batch: EpisodeBatch, baseline=False):
    return entropy_regularized_gradient(policy, batch, 0.0, baseline=baseline)


def log_prob_gradient(policy, X, actions):
    """Per-sample gradient of ``log pi(a|x)``, rows stacked; for gradient checks."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = policy.prob(X)
    c = _score_weights(p, np.asarray(actions), np.ones(len(p), dtype=bool))
    return np.stack([policy.vjp(X[i:i + 1], c[i:i + 1]) for i in range(len(p))])


@dataclass
class CurvePoint:
    iteration: int
    episodes: int
    mean_cost: float
    comm_rate: float
    entropy: float


def train(policy, env, cfg: LearnerConfig, callback=None):
    """Plain SGD on the selected estimator; returns the policy and its learning curve.

    ``env.rollout(policy, rng, n_episodes)`` must return an ``EpisodeBatch``
    sampled from ``policy``.
    """
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for it in range(cfg.iterations):
        batch = env.rollout(policy, rng, cfg.batch_size)
        scaled = EpisodeBatch(batch.features, batch.actions, batch.forced,
                              batch.costs / cfg.cost_scale, batch.terminal / cfg.cost_scale)
        grad = entropy_regularized_gradient(policy, scaled, cfg.beta, baseline=cfg.baseline)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient at iteration {it}")
        if cfg.max_grad_norm is not None:
            norm = np.linalg.norm(grad)
            if norm > cfg.max_grad_norm:
                grad = grad * (cfg.max_grad_norm / norm)
        policy.set_flat(policy.get_flat() - cfg.learning_rate * grad)
        e, h, d = batch.features.shape
        mask = batch.decision_mask()
        p = policy.prob(batch.features.reshape(e * h, d)).reshape(e, h)
        ent = float(entropy_of(p)[mask].mean()) if mask.any() else 0.0
        point = CurvePoint(it, (it + 1) * cfg.batch_size, float(batch.episode_costs.mean()), batch.comm_rate, ent)
        curve.append(point)
        if callback is not None:
            callback(point)
    return policy, curve


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "episodes", "mean_cost", "comm_rate", "entropy"])
        for c in curve:
            w.writerow([c.iteration, c.episodes, repr(c.mean_cost), repr(c.comm_rate), repr(c.entropy)])


# ---------------------------------------------------------------- serialization

POLICY_MAGIC = b"ETRG"
POLICY_VERSION = 1
_POLICY_HEAD = struct.Struct("<4sH")


def dump_policy(policy, config_hash="") -> bytes:
    """Magic, version, then an ``npz`` archive of parameters and normalization constants."""
    arrays = {"kind": np.array(policy.kind), "center": policy.center, "scale": policy.scale,
              "config_hash": np.array(config_hash)}
    if isinstance(policy, MLPPolicy):
        arrays.update(w1=policy.w1, b1=policy.b1, w2=policy.w2, b2=policy.b2)
    else:
        arrays.update(theta=policy.theta)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return _POLICY_HEAD.pack(POLICY_MAGIC, POLICY_VERSION) + buf.getvalue()


def load_policy(data: bytes):
    magic, version = _POLICY_HEAD.unpack_from(data)
    if magic != POLICY_MAGIC or version != POLICY_VERSION:
        raise ValueError("not a trigger-policy file of a supported version")
    with np.load(io.BytesIO(data[_POLICY_HEAD.size:]), allow_pickle=False) as z:
        kind = str(z["kind"])
        if kind == "mlp":
            pol = MLPPolicy(z["w1"].shape[1], z["w1"].shape[0], z["center"], z["scale"])
            pol.w1, pol.b1, pol.w2, pol.b2 = z["w1"], z["b1"], z["w2"], z["b2"]
        elif kind == "linear":
            pol = LinearPolicy(z["center"].size, z["center"], z["scale"], z["theta"])
        else:
            raise ValueError(f"unknown policy kind {kind!r}")
        return pol, str(z["config_hash"])


class LearnedTrigger(BaseEstimator):
    """Estimator facade: ``fit(env)`` trains, ``predict``/``predict_proba`` act on feature rows."""

    def __init__(self, hidden=100, beta=0.0, epsilon=0.0, learning_rate=1e-3, iterations=200,
                 batch_size=16, baseline=True, seed=0, cost_scale=1.0, max_grad_norm=None,
                 center=0.0, scale=1.0):
        self.hidden = hidden
        self.beta = beta
        self.epsilon = epsilon
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.baseline = baseline
        self.seed = seed
        self.cost_scale = cost_scale
        self.max_grad_norm = max_grad_norm
        self.center = center
        self.scale = scale

    def learner_config(self):
        return LearnerConfig(self.beta, self.epsilon, self.learning_rate, self.iterations, self.batch_size,
                             self.baseline, self.seed, self.cost_scale, self.max_grad_norm)

    def fit(self, env, y=None, policy=None):
        if policy is None:
            policy = MLPPolicy(env.n_features, self.hidden, self.center, self.scale, seed=self.seed)
        self.policy_, self.curve_ = train(policy, env, self.learner_config())
        self.n_features_in_ = policy.n_in
        return self

    def predict_proba(self, X):
        p = self.policy_.prob(check_array(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return self.policy_.act(check_array(X))
