"""Event-triggering layer: sufficient statistic, augmented dynamics, stage cost.

``l`` counts samples since the last transmission. A transmission at ``t``
applies the first element of the fresh plan, so the next sample is one step
into that plan and ``l`` restarts at 1; a hold advances it by one. The stored
plan is therefore always read at offset ``l``, and a transmission is forced
once ``l`` reaches ``T_s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .building import ConfigError


@dataclass(frozen=True)
class TriggerConfig:
    lam: float
    t_s: int
    q: np.ndarray
    r: np.ndarray
    x_ref: np.ndarray
    horizon: int
    plan_length: int = 7

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("communication penalty must be non-negative")
        if self.t_s < 1:
            raise ConfigError("forced-trigger cap must be at least 1")
        if self.t_s > self.plan_length:
            raise ConfigError(f"cap T_s={self.t_s} exceeds the stored plan length {self.plan_length}")
        object.__setattr__(self, "q", np.atleast_2d(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "r", np.atleast_2d(np.asarray(self.r, dtype=float)))
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float))


@dataclass(frozen=True)
class TriggerState:
    x: np.ndarray
    y: np.ndarray
    l: int

    @classmethod
    def initial(cls, x, t_s):
        """Start at the cap so the first sample always transmits."""
        x = np.asarray(x, dtype=float)
        return cls(x, x.copy(), int(t_s))


def advance(s: TriggerState, a: int, x_next) -> TriggerState:
    """Augmented dynamics: ``y+ = (1-a) y + a x``, ``l+ = (1-a) l + 1``, ``x+ = x_next``."""
    y = s.x if a else s.y
    return TriggerState(np.asarray(x_next, dtype=float), np.array(y, copy=True), 1 if a else s.l + 1)


def advance_batch(x, y, l, a, x_next):
    """Vectorized ``advance`` over a leading batch axis."""
    a = np.asarray(a, dtype=bool)
    return x_next, np.where(a[:, None], x, y), np.where(a, 1, l + 1)


def stage_cost(x, u, a, cfg: TriggerConfig, terminal=False):
    """``(x - x_r)' Q (x - x_r) + u' R u + lam * a``; only the state term when ``terminal``."""
    e = np.asarray(x, dtype=float) - cfg.x_ref
    cost = np.einsum("...i,ij,...j->...", e, cfg.q, e)
    if terminal:
        return cost
    u = np.asarray(u, dtype=float)
    return cost + np.einsum("...i,ij,...j->...", u, cfg.r, u) + cfg.lam * np.asarray(a, dtype=float)


def forced_trigger(l, t_s):
    return np.asarray(l) >= t_s


def apply_override(a_policy, l, t_s):
    """The action actually taken: the policy's choice unless the cap forces a transmission."""
    return np.logical_or(np.asarray(a_policy, dtype=bool), forced_trigger(l, t_s)).astype(int)


def threshold_policy(x, y, alpha):
    """Transmit iff ``||x - y||_inf > alpha``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return (np.max(np.abs(np.asarray(x) - np.asarray(y)), axis=-1) > alpha).astype(int)


@dataclass(frozen=True)
class StoredPlan:
    u: np.ndarray  # (T, m)

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_2d(np.asarray(self.u, dtype=float)))

    def __len__(self):
        return self.u.shape[0]

    def at(self, offset):
        if not 0 <= offset < len(self):
            raise IndexError(f"offset {offset} outside the stored plan of length {len(self)}")
        return self.u[offset]


def select_input(s: TriggerState, a: int, plan: StoredPlan, fresh: StoredPlan | None = None):
    """Applied input and the plan kept afterwards."""
    if a:
        if fresh is None:
            raise ValueError("a transmission needs a fresh plan")
        return fresh.at(0), fresh
    return plan.at(s.l), plan


class ThresholdTrigger(BaseEstimator):
    """Threshold rule as an estimator over rows ``[x, y]``."""

    def __init__(self, alpha=0.0):
        self.alpha = alpha

    def fit(self, X=None, y=None):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        return self

    def predict(self, X):
        X = check_array(X)
        half = X.shape[1] // 2
        return threshold_policy(X[:, :half], X[:, half:], self.alpha)
