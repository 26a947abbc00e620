"""Q-MMR: per-datapoint weights learned level by level through moment matching.

At level ``h`` the weights ``w_h`` are chosen so that ``w_h``-reweighted pairs
``(s_h, a_h)`` look like ``w_{h-1}``-reweighted pairs ``(s_h, pi)`` to every
discriminator in the class. The return estimate is the reweighted reward sum
and comes with a bound that is computable from the data alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import pinv_psd
from .datasets import TrajectoryDataset
from .errors import ValidationError
from .function_classes import FeatureMap, LinearClass, TabularClass, gram_matrix, target_moment

ROLES = ("no_regret_on_w", "no_regret_on_f")


def second_moment(w):
    """``||w||_[n] = sqrt(mean(w^2))``."""
    w = np.asarray(w, dtype=float)
    return float(np.sqrt(np.mean(w * w)))


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Weights ``weights[h, i]`` for ``h = 0..H`` and the loss achieved at each level.

    Row 0 is the all-ones vector; ``losses[0]`` is 0 by convention.
    """

    weights: np.ndarray
    losses: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True)
        losses = np.array(self.losses, dtype=float, copy=True)
        if w.ndim != 2 or losses.shape != (w.shape[0],):
            raise ValidationError("weights must be (H+1, n) with one loss per level")
        if np.any(w[0] != 1.0):
            raise ValidationError("level-0 weights must be exactly 1")
        if np.any(losses < 0):
            raise ValidationError("matching losses are nonnegative")
        w.setflags(write=False)
        losses.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "losses", losses)

    @property
    def horizon(self):
        return self.weights.shape[0] - 1

    @property
    def n(self):
        return self.weights.shape[1]

    @property
    def second_moments(self):
        return np.sqrt(np.mean(self.weights ** 2, axis=1))


@dataclass(frozen=True)
class BoundTerms:
    eps_stat: np.ndarray
    losses: np.ndarray
    total: float
    delta: float


@dataclass(frozen=True, eq=False)
class OpeEstimate:
    j_hat: float
    per_level_reward: np.ndarray
    losses: np.ndarray
    second_moments: np.ndarray
    eps_stat: np.ndarray
    bound: float
    delta: float
    v_max: float
    method: str = "qmmr"

    def to_dict(self):
        return {
            "method": self.method,
            "j_hat": float(self.j_hat),
            "per_level": {
                "loss": [float(x) for x in self.losses],
                "second_moment": [float(x) for x in self.second_moments],
                "eps_stat": [float(x) for x in self.eps_stat],
            },
            "bound": float(self.bound),
            "delta": float(self.delta),
        }


@dataclass(frozen=True)
class MinimaxConfig:
    """Budget ``C`` for ``W_C = {w : ||w||_[n] <= C}``, ``T`` rounds, step size and role order.

    ``step="auto"`` uses the regret-optimal projected-OGD step for the player
    running online learning; see :func:`solve_level_minimax`.
    """

    budget: float
    iterations: int = 10_000
    step: float | str = "auto"
    role: str = "no_regret_on_w"

    def __post_init__(self):
        if not self.budget >= 0:
            raise ValidationError("budget C must be nonnegative")
        if self.iterations < 1:
            raise ValidationError("iterations T must be at least 1")
        if self.role not in ROLES:
            raise ValidationError(f"role must be one of {ROLES}")
        if self.step != "auto" and not (isinstance(self.step, (int, float)) and self.step > 0):
            raise ValidationError("step must be 'auto' or a positive number")


# --- level solvers ------------------------------------------------------------

def solve_level_linear(ds, features: FeatureMap, pi, h, w_prev):
    """Least-2nd-moment minimiser of the linear matching loss.

    ``w_i = phi_i^T Sigma_hat^+ psi_hat``. With invertible ``Sigma_hat`` the loss
    is exactly zero; otherwise the residual is the part of ``psi_hat`` outside
    the range of ``Sigma_hat``.
    """
    x = features.at_data(ds, h)
    psi = target_moment(ds, features, h, w_prev, pi)
    return x @ (pinv_psd(x.T @ x / ds.n) @ psi)


def solve_level_tabular(ds, pi, h, w_prev):
    """Cell-constant weights ``n * target(s, a) / N(s, a)``.

    On visited cells this is the empirical occupancy ratio; target mass on
    unvisited cells cannot be matched and is left as loss.
    """
    w_prev = np.asarray(w_prev, dtype=float)
    S, A = ds.states_per_level[h], ds.num_actions
    state_mass = np.bincount(ds.local_states(h), weights=w_prev, minlength=S) / ds.n
    target = (state_mass[:, None] * pi.probs[h]).ravel()
    cells = ds.cells(h)
    counts = np.bincount(cells, minlength=S * A)
    return ds.n * target[cells] / counts[cells]


def solve_level_minimax(ds, cls, pi, h, w_prev, cfg: MinimaxConfig):
    """No-regret + best-response solver for ``min_{w in W_C} sup_f m_w(f)``.

    ``no_regret_on_w``: projected OGD on ``w`` against exact best responses
    ``f_t``; the gradient of ``m_w(f_t)`` in ``w`` is ``f_t|_n / n``, and the
    automatic step ``C n / (G sqrt(T))`` is the regret-optimal choice for a ball
    of Euclidean radius ``C sqrt(n)`` and gradients of norm ``<= G / sqrt(n)``.

    ``no_regret_on_f`` (linear classes only): OGD ascent on ``theta`` against the
    closed-form best response ``w_t = -C f_t|_n / ||f_t|_n||_[n]``.

    Returns the averaged iterate and the per-round losses ``L(w_t)``.
    """
    if not getattr(cls, "symmetric", False):
        raise ValidationError("the minimax solver requires a class closed under negation")
    problem = cls.level_problem(ds, h, pi, w_prev)
    n = ds.n
    C, T = cfg.budget, cfg.iterations
    zero = np.zeros(n)
    G = problem.radius()
    if C == 0 or G == 0:
        return zero, np.array([problem.loss(zero)])

    avg = np.zeros(n)
    trace = np.empty(T)
    if cfg.role == "no_regret_on_w":
        eta = C * n / (G * np.sqrt(T)) if cfg.step == "auto" else float(cfg.step)
        w = zero.copy()
        for t in range(T):
            avg += w
            f, value = problem.best_response(w)
            trace[t] = value
            w = w - eta * f / n
            norm = second_moment(w)
            if norm > C:
                w *= C / norm
        return avg / T, trace

    if not isinstance(cls, LinearClass):
        raise ValidationError("no_regret_on_f is implemented for linear classes only")
    x, radius = problem.x, cls.theta_radius
    lam = np.linalg.eigvalsh(x.T @ x / n).max()
    m_bound = np.linalg.norm(problem.target) + C * np.sqrt(lam)
    eta = radius / (m_bound * np.sqrt(T)) if cfg.step == "auto" else float(cfg.step)
    theta = np.zeros(x.shape[1])
    for t in range(T):
        f = x @ theta
        fn = second_moment(f)
        w = -C * f / fn if fn > 0 else zero
        avg += w
        m = problem.residual(w)
        trace[t] = radius * np.linalg.norm(m)
        theta = theta + eta * m
        tn = np.linalg.norm(theta)
        if tn > radius:
            theta *= radius / tn
    return avg / T, trace


# --- losses, estimate, bound ----------------------------------------------------

def matching_loss(ds, cls, pi, h, w_curr, w_prev) -> float:
    """``sup_{f in F_h} |m_{w_curr}(f)|`` in closed form for the given class."""
    w_curr = np.asarray(w_curr, dtype=float)
    if w_curr.shape != (ds.n,):
        raise ValidationError("w_curr must have one entry per trajectory")
    return cls.level_problem(ds, h, pi, w_prev).loss(w_curr)


def estimate_return(ds: TrajectoryDataset, weights: WeightMatrix) -> float:
    """``sum_h (1/n) sum_i w_h^i r_h^i``; level 0 contributes nothing since ``r_0 = 0``."""
    return float(np.sum(np.mean(weights.weights * ds.rewards, axis=1)))


def error_bound(weights: WeightMatrix, v_max, delta, n) -> BoundTerms:
    """Data-dependent bound ``sum_{h>=1} L_h + sum_{h>=0} eps_h`` holding w.p. ``1 - delta``.

    ``eps_h = ||w_h||_[n] V_max sqrt(2 log(2 (H+1) / delta) / n)``.
    """
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    H = weights.horizon
    scale = v_max * np.sqrt(2.0 * np.log(2.0 * (H + 1) / delta) / n)
    eps = weights.second_moments * scale
    total = float(weights.losses[1:].sum() + eps.sum())
    return BoundTerms(eps, weights.losses.copy(), total, float(delta))


def _prefix(ds: TrajectoryDataset, h: int) -> TrajectoryDataset:
    """The data a level-``h`` solver may see: levels ``0..h`` with ``r_h`` hidden."""
    rewards = np.array(ds.rewards[: h + 1])
    rewards[h] = 0.0
    return TrajectoryDataset(ds.states[: h + 1], ds.actions[: h + 1], rewards,
                             ds.states_per_level[: h + 1], ds.num_actions, ds.provenance)


def run_qmmr(ds, cls, pi, solver: MinimaxConfig | None = None, *, v_max, delta=0.1):
    """Run all levels and return ``(WeightMatrix, OpeEstimate)``.

    ``cls`` is a :class:`LinearClass`, a :class:`TabularClass`, a bare
    :class:`FeatureMap` (linear class with radius 1) or the string
    ``"tabular"`` (box ``[0, v_max]``). Without ``solver`` the closed-form
    least-2nd-moment solution is used; with a :class:`MinimaxConfig` the
    no-regret solver runs at every level.

    Each level solver receives only the trajectory prefix up to ``(s_h, a_h)``.
    """
    if isinstance(cls, FeatureMap):
        cls = LinearClass(cls)
    elif cls == "tabular":
        cls = TabularClass(upper=v_max)
    if isinstance(cls, LinearClass):
        cls.features.check_layout(ds.states_per_level, ds.num_actions)
        method = "qmmr_linear"
    elif isinstance(cls, TabularClass):
        method = "qmmr_tabular"
    else:
        raise ValidationError(f"unsupported function class {cls!r}")
    if solver is not None:
        method = "qmmr_minimax"

    H, n = ds.horizon, ds.n
    weights = np.ones((H + 1, n))
    losses = np.zeros(H + 1)
    for h in range(1, H + 1):
        view = _prefix(ds, h)
        if solver is not None:
            w, _ = solve_level_minimax(view, cls, pi, h, weights[h - 1], solver)
        elif isinstance(cls, LinearClass):
            w = solve_level_linear(view, cls.features, pi, h, weights[h - 1])
        else:
            w = solve_level_tabular(view, pi, h, weights[h - 1])
        weights[h] = w
        losses[h] = matching_loss(view, cls, pi, h, w, weights[h - 1])

    wm = WeightMatrix(weights, losses)
    terms = error_bound(wm, v_max, delta, n)
    per_level = np.mean(wm.weights * ds.rewards, axis=1)
    est = OpeEstimate(float(per_level.sum()), per_level, wm.losses, wm.second_moments,
                      terms.eps_stat, terms.total, float(delta), float(v_max), method)
    return wm, est


def telescoped_sum(ds, weights, q_tables, pi):
    """``sum_{h=0}^H (1/n) sum_i (w_h^i Q_h^i - w_{h+1}^i Q_{h+1}^i)`` with ``w_{H+1} Q_{H+1} = 0``.

    For any weights with ``w_0 = 1`` this collapses to ``Q_0(s_0, a_0)``.
    """
    w = np.asarray(weights.weights if isinstance(weights, WeightMatrix) else weights)
    H = ds.horizon
    q_at = [q_tables[h][ds.local_states(h), ds.actions[h]] for h in range(H + 1)]
    total = 0.0
    for h in range(H + 1):
        nxt = w[h + 1] * q_at[h + 1] if h < H else 0.0
        total += float(np.mean(w[h] * q_at[h] - nxt))
    return total
