"""Feature maps and discriminator classes.

A discriminator class turns one level of the matching problem into a
:class:`LevelProblem`: an object that knows the signed empirical functional

    m_w(f) = (1/n) sum_i w_i f(s_h^i, a_h^i) - (1/n) sum_i w_prev_i f(s_h^i, pi)

and can return ``sup_f |m_w(f)|`` (the matching loss) and a best response
``argmax_f m_w(f)`` evaluated on the data. The minimax solver only talks to
this interface.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Per-level feature tensors ``arrays[h]`` of shape ``(S_h, A, d_h)`` for ``h = 0..H``."""

    arrays: tuple

    def __post_init__(self):
        arrs = []
        for h, a in enumerate(self.arrays):
            a = np.array(a, dtype=float, copy=True)
            if a.ndim != 3:
                raise ValidationError(f"feature level {h} must have shape (S_h, A, d_h)")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"feature level {h} has non-finite entries")
            a.setflags(write=False)
            arrs.append(a)
        object.__setattr__(self, "arrays", tuple(arrs))

    @classmethod
    def one_hot(cls, states_per_level, num_actions):
        return cls(tuple(np.eye(s * num_actions).reshape(s, num_actions, s * num_actions)
                         for s in states_per_level))

    @property
    def horizon(self):
        return len(self.arrays) - 1

    def dim(self, h):
        return self.arrays[h].shape[2]

    def flat(self, h):
        """``(S_h * A, d_h)`` matrix, rows ordered by cell ``s * A + a``."""
        a = self.arrays[h]
        return a.reshape(-1, a.shape[2])

    def policy_average(self, h, pi):
        """``phi(s, pi) = sum_a pi(a|s) phi(s, a)`` for every local state at level ``h``."""
        return np.einsum("sa,sad->sd", pi.probs[h], self.arrays[h])

    def at_data(self, ds, h):
        return self.arrays[h][ds.local_states(h), ds.actions[h]]

    def at_data_policy(self, ds, h, pi):
        return self.policy_average(h, pi)[ds.local_states(h)]

    def check_layout(self, states_per_level, num_actions):
        shape = tuple((a.shape[0], a.shape[1]) for a in self.arrays)
        if shape != tuple((s, num_actions) for s in states_per_level):
            raise ValidationError("feature map layout does not match the MDP/dataset layout")

    def to_dict(self):
        return {"levels": [self.flat(h).tolist() for h in range(self.horizon + 1)]}

    @classmethod
    def from_dict(cls, doc, states_per_level, num_actions):
        arrays = []
        for s, mat in zip(states_per_level, doc["levels"]):
            m = np.array(mat, dtype=float)
            arrays.append(m.reshape(s, num_actions, m.shape[1]))
        return cls(tuple(arrays))


def gram_matrix(ds, features: FeatureMap, h: int) -> np.ndarray:
    """Empirical covariance ``(1/n) sum_i phi_i phi_i^T`` at level ``h``."""
    x = features.at_data(ds, h)
    return x.T @ x / ds.n


def target_moment(ds, features: FeatureMap, h: int, w_prev, pi) -> np.ndarray:
    """``(1/n) sum_i w_prev_i phi(s_h^i, pi)``: the moment level-``h`` weights must reproduce."""
    w_prev = np.asarray(w_prev, dtype=float)
    if w_prev.shape != (ds.n,):
        raise ValidationError("w_prev must have one entry per trajectory")
    return features.at_data_policy(ds, h, pi).T @ w_prev / ds.n


# --- linear class -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearClass:
    """``{phi^T theta : ||theta||_2 <= theta_radius}``; symmetric by construction."""

    features: FeatureMap
    theta_radius: float = 1.0

    def __post_init__(self):
        if not (self.theta_radius > 0 and np.isfinite(self.theta_radius)):
            raise ValidationError("theta_radius must be positive and finite")

    symmetric = True

    def level_problem(self, ds, h, pi, w_prev):
        x = self.features.at_data(ds, h)
        target = target_moment(ds, self.features, h, w_prev, pi)
        return LinearLevel(x, target, self.theta_radius)


def best_response_linear(cls: LinearClass, m_vec):
    """Maximiser of ``theta^T m`` over the ball; equality case of Cauchy-Schwarz."""
    m_vec = np.asarray(m_vec, dtype=float)
    norm = np.linalg.norm(m_vec)
    if norm == 0:
        return np.zeros_like(m_vec), 0.0
    return cls.theta_radius * m_vec / norm, float(cls.theta_radius * norm)


class LinearLevel:
    def __init__(self, x, target, theta_radius):
        self.x = x
        self.target = target
        self.theta_radius = theta_radius
        self.n = x.shape[0]

    def residual(self, w):
        return self.x.T @ w / self.n - self.target

    def loss(self, w):
        return float(self.theta_radius * np.linalg.norm(self.residual(w)))

    def best_response(self, w):
        m = self.residual(w)
        norm = np.linalg.norm(m)
        if norm == 0:
            return np.zeros(self.n), 0.0
        theta = self.theta_radius * m / norm
        return self.x @ theta, float(self.theta_radius * norm)

    def radius(self):
        """``G = sup_f ||f|_n||_[n] = Theta * sqrt(lambda_max(Sigma_hat))``."""
        sigma = self.x.T @ self.x / self.n
        return float(self.theta_radius * np.sqrt(max(np.linalg.eigvalsh(sigma).max(initial=0.0), 0.0)))


# --- tabular class ------------------------------------------------------------

@dataclass(frozen=True)
class TabularClass:
    """All functions on ``S_h x A`` with values in ``[0, upper]``.

    With ``symmetric=True`` the box is ``[-upper, upper]`` instead, which is
    what the minimax solver needs.
    """

    upper: float = 1.0
    symmetric: bool = False

    def __post_init__(self):
        if not self.upper > 0:
            raise ValidationError("upper must be positive")

    def level_problem(self, ds, h, pi, w_prev):
        w_prev = np.asarray(w_prev, dtype=float)
        if w_prev.shape != (ds.n,):
            raise ValidationError("w_prev must have one entry per trajectory")
        S, A = ds.states_per_level[h], ds.num_actions
        state_mass = np.bincount(ds.local_states(h), weights=w_prev, minlength=S) / ds.n
        target = (state_mass[:, None] * pi.probs[h]).ravel()
        return TabularLevel(ds.cells(h), target, self.upper, self.symmetric)


class TabularLevel:
    def __init__(self, cells, target, upper, symmetric):
        self.cells = cells
        self.target = target
        self.upper = upper
        self.symmetric = symmetric
        self.n = len(cells)

    def residual(self, w):
        """Signed per-cell mismatch ``delta(s, a)``."""
        got = np.bincount(self.cells, weights=w, minlength=len(self.target)) / self.n
        return got - self.target

    def loss(self, w):
        delta = self.residual(w)
        if self.symmetric:
            return float(self.upper * np.abs(delta).sum())
        pos = delta[delta > 0].sum()
        neg = -delta[delta < 0].sum()
        return float(self.upper * max(pos, neg))

    def best_response(self, w):
        delta = self.residual(w)
        if self.symmetric:
            f = self.upper * np.sign(delta)
            return f[self.cells], float(self.upper * np.abs(delta).sum())
        f = np.where(delta > 0, self.upper, 0.0)
        return f[self.cells], float(self.upper * delta[delta > 0].sum())

    def radius(self):
        return float(self.upper)

    def unmatched_mass(self, w):
        """Target mass sitting on cells with no data."""
        seen = np.bincount(self.cells, minlength=len(self.target)) > 0
        return float(np.abs(self.target[~seen]).sum())

    def max_cell_mismatch(self, w):
        return float(np.abs(self.residual(w)).max())
