"""Condensed MPC and the box-projected fast gradient method.

The condensed objective in stacked inputs ``u = (u_0, ..., u_{T-1})`` is

    J(u) = u' H u + 2 u' (F' x0 + f) + const

with ``H = G' Qb G + Rb``, ``F' = G' Qb Phi`` and ``f = G' Qb (Lam M - Xref)``,
where the predicted states are ``X = Phi x0 + G u + Lam M`` for steps 1..T.
The gradient is ``2 (H u + F' x0 + f)`` and the solver uses step ``1/(2L)``
with ``L = lambda_max(H)``, i.e. ``d = (I - H/L) xi - (F' x0 + f)/L``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .building import ConfigError


@dataclass(frozen=True)
class MpcProblem:
    a: np.ndarray
    b: np.ndarray
    q: np.ndarray
    r: np.ndarray
    x_ref: np.ndarray
    horizon: int
    mean_disturbance: np.ndarray  # (T, n) or (n,)
    lower: np.ndarray  # (m,) or (T, m)
    upper: np.ndarray

    def __post_init__(self):
        a, b = np.atleast_2d(self.a).astype(float), np.atleast_2d(self.b).astype(float)
        n, m = b.shape
        if a.shape != (n, n):
            raise ConfigError("A must be square and match the rows of B")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        q, r = np.atleast_2d(self.q).astype(float), np.atleast_2d(self.r).astype(float)
        if q.shape != (n, n) or r.shape != (m, m):
            raise ConfigError("Q and R dimensions do not match the model")
        for name, w in (("Q", q), ("R", r)):
            if not np.allclose(w, w.T):
                raise ConfigError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(w)
            except np.linalg.LinAlgError:
                raise ConfigError(f"{name} is not positive definite") from None
        t = self.horizon
        md = np.asarray(self.mean_disturbance, dtype=float)
        md = np.broadcast_to(md, (t, n)).copy()
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (t, m)).copy()
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), (t, m)).copy()
        if np.any(lo > hi):
            raise ConfigError("box lower bound exceeds upper bound")
        xr = np.broadcast_to(np.asarray(self.x_ref, dtype=float), (n,)).copy()
        for name, val in (("a", a), ("b", b), ("q", q), ("r", r), ("x_ref", xr),
                          ("mean_disturbance", md), ("lower", lo), ("upper", hi)):
            object.__setattr__(self, name, val)

    @property
    def n_state(self):
        return self.b.shape[0]

    @property
    def n_input(self):
        return self.b.shape[1]

    def horizon_cost(self, u, x0, disturbance=None):
        """Direct sum of the stage costs over the horizon (states 1..T, inputs 0..T-1)."""
        u = np.asarray(u, dtype=float).reshape(self.horizon, self.n_input)
        w = self.mean_disturbance if disturbance is None else disturbance
        x = np.asarray(x0, dtype=float)
        total = 0.0
        for k in range(self.horizon):
            total += u[k] @ self.r @ u[k]
            x = self.a @ x + self.b @ u[k] + w[k]
            e = x - self.x_ref
            total += e @ self.q @ e
        return total


@dataclass(frozen=True)
class CondensedQP:
    h: np.ndarray
    f: np.ndarray  # F' with shape (nT, n), multiplies x0
    offset: np.ndarray  # f with shape (nT,)
    lower: np.ndarray
    upper: np.ndarray
    lipschitz: float
    eta: float
    n_input: int

    @property
    def size(self):
        return self.h.shape[0]

    @property
    def step_matrix(self):
        return np.eye(self.size) - self.h / self.lipschitz

    @property
    def state_matrix(self):
        return -self.f / self.lipschitz

    def linear_term(self, x0, offset=None):
        off = self.offset if offset is None else offset
        return np.asarray(x0, dtype=float) @ self.f.T + off

    def objective(self, u, x0, offset=None):
        u = np.asarray(u, dtype=float)
        return np.einsum("...i,ij,...j->...", u, self.h, u) + 2 * np.sum(u * self.linear_term(x0, offset), axis=-1)

    def with_offset(self, offset):
        return CondensedQP(self.h, self.f, np.asarray(offset, dtype=float), self.lower, self.upper,
                           self.lipschitz, self.eta, self.n_input)


def prediction_matrices(a, b, horizon):
    """``Phi`` (nT, n), ``G`` (nT, mT) and ``Lam`` (nT, nT) for states 1..T."""
    n, m = b.shape
    t = horizon
    powers = [np.eye(n)]
    for _ in range(t):
        powers.append(a @ powers[-1])
    phi = np.vstack(powers[1:])
    g = np.zeros((n * t, m * t))
    lam = np.zeros((n * t, n * t))
    for k in range(t):
        for j in range(k + 1):
            g[k * n:(k + 1) * n, j * m:(j + 1) * m] = powers[k - j] @ b
            lam[k * n:(k + 1) * n, j * n:(j + 1) * n] = powers[k - j]
    return phi, g, lam


def condense(p: MpcProblem) -> CondensedQP:
    phi, g, lam = prediction_matrices(p.a, p.b, p.horizon)
    t = p.horizon
    qbar = np.kron(np.eye(t), p.q)
    rbar = np.kron(np.eye(t), p.r)
    gq = g.T @ qbar
    h = gq @ g + rbar
    h = (h + h.T) / 2
    ft = gq @ phi
    offset = gq @ (lam @ p.mean_disturbance.ravel() - np.tile(p.x_ref, t))
    eig = np.linalg.eigvalsh(h)
    if eig[0] <= 0:
        raise ConfigError("condensed Hessian is not positive definite")
    lip = float(eig[-1])
    kappa = lip / float(eig[0])
    eta = (np.sqrt(kappa) - 1) / (np.sqrt(kappa) + 1)
    return CondensedQP(h, ft, offset, p.lower.ravel(), p.upper.ravel(), lip, float(eta), p.n_input)


def disturbance_offset(p: MpcProblem, mean_disturbance):
    """Condensed offset for a different disturbance forecast, reusing ``p``'s model."""
    phi, g, lam = prediction_matrices(p.a, p.b, p.horizon)
    qbar = np.kron(np.eye(p.horizon), p.q)
    md = np.asarray(mean_disturbance, dtype=float)
    flat = md.reshape(*md.shape[:-2], -1)
    return (flat @ lam.T - np.tile(p.x_ref, p.horizon)) @ (g.T @ qbar).T


def project_box(d, lower, upper):
    """Componentwise ``l`` if ``d < l``, ``h`` if ``d > h``, else ``d``."""
    return np.minimum(np.maximum(d, lower), upper)


def fgm_gradient_step(qp: CondensedQP, xi, x0, offset=None):
    return xi @ qp.step_matrix.T - qp.linear_term(x0, offset) / qp.lipschitz


def fgm_solve(qp: CondensedQP, x0, u_init, iterations, offset=None, return_trace=False):
    """Projected fast gradient method started at ``u_init``; returns ``u(K)``.

    ``x0`` and ``u_init`` may carry a leading batch axis.
    """
    if iterations <= 0:
        raise ValueError("iterations must be positive")
    u = np.asarray(u_init, dtype=float)
    if np.any(u < qp.lower - 1e-12) or np.any(u > qp.upper + 1e-12):
        raise ValueError("warm start lies outside the box")
    xi = u
    trace = []
    for _ in range(iterations):
        d = fgm_gradient_step(qp, xi, x0, offset)
        u_next = project_box(d, qp.lower, qp.upper)
        xi = (1 + qp.eta) * u_next - qp.eta * u
        u = u_next
        if return_trace:
            trace.append(u)
    return (u, np.array(trace)) if return_trace else u


def projected_gradient(qp: CondensedQP, x0, u_init, iterations, offset=None):
    """Plain projected gradient with step 1/(2L); used as a slow reference solver."""
    u = np.asarray(u_init, dtype=float)
    for _ in range(iterations):
        u = project_box(fgm_gradient_step(qp, u, x0, offset), qp.lower, qp.upper)
    return u


def arbitrate_flows(m_tem, m_c):
    """The actuator runs the larger of the two requested flows in each zone."""
    return np.maximum(m_tem, m_c)


def shift_plan(u, n_input, steps=1):
    """Drop the first ``steps`` blocks and repeat the last block to keep length."""
    u = np.asarray(u, dtype=float)
    if steps <= 0:
        return u.copy()
    total = u.shape[-1] // n_input
    steps = min(steps, total - 1)
    blocks = u.reshape(*u.shape[:-1], total, n_input)
    tail = np.repeat(blocks[..., -1:, :], steps, axis=-2)
    return np.concatenate([blocks[..., steps:, :], tail], axis=-2).reshape(u.shape)


class FastGradientMPC(BaseEstimator):
    """Estimator wrapper: ``fit`` condenses the problem, ``predict`` maps states to plans."""

    def __init__(self, a=None, b=None, q=None, r=None, x_ref=0.0, horizon=7,
                 mean_disturbance=0.0, lower=-np.inf, upper=np.inf, iterations=1):
        self.a = a
        self.b = b
        self.q = q
        self.r = r
        self.x_ref = x_ref
        self.horizon = horizon
        self.mean_disturbance = mean_disturbance
        self.lower = lower
        self.upper = upper
        self.iterations = iterations

    def fit(self, X=None, y=None):
        self.problem_ = MpcProblem(self.a, self.b, self.q, self.r, self.x_ref, self.horizon,
                                   self.mean_disturbance, self.lower, self.upper)
        self.qp_ = condense(self.problem_)
        self.n_features_in_ = self.problem_.n_state
        return self

    def predict(self, X, u_init=None):
        check_is_fitted(self, "qp_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} state entries, got {X.shape[1]}")
        if u_init is None:
            u_init = project_box(np.zeros((X.shape[0], self.qp_.size)), self.qp_.lower, self.qp_.upper)
        return fgm_solve(self.qp_, X, u_init, self.iterations)

    def score(self, X, y=None):
        """Negative mean condensed objective of the predicted plans."""
        u = self.predict(X)
        return -float(np.mean(self.qp_.objective(u, check_array(X))))
