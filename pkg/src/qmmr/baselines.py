"""Comparison estimators: linear FQE, tabular FQE and per-trajectory importance sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import pinv_psd
from .datasets import TrajectoryDataset
from .errors import ValidationError
from .function_classes import FeatureMap


@dataclass(frozen=True, eq=False)
class FqeSolution:
    """Per-level coefficients (linear) or Q tables (tabular) and the prediction ``j_hat``.

    ``coefficients[h]`` is defined for ``h = 1..H``; entry 0 is ``None``.
    For tabular FQE ``visited[h]`` marks the cells that had data; the others
    hold 0.
    """

    coefficients: tuple
    j_hat: float
    method: str
    visited: tuple = field(default=())

    def to_dict(self):
        return {"method": self.method, "j_hat": float(self.j_hat)}


def fqe_linear(ds: TrajectoryDataset, features: FeatureMap, pi) -> FqeSolution:
    """Backward least squares on Bellman targets via the normal equations.

    ``Sigma_h theta_h = (1/n) sum_i phi_i (r_h^i + phi(s_{h+1}^i, pi)^T theta_{h+1})``
    with ``theta_{H+1} = 0``; singular ``Sigma_h`` uses the pseudo-inverse.
    """
    features.check_layout(ds.states_per_level, ds.num_actions)
    H, n = ds.horizon, ds.n
    thetas = [None] * (H + 1)
    nxt = np.zeros(n)
    for h in range(H, 0, -1):
        x = features.at_data(ds, h)
        y = ds.rewards[h] + nxt
        thetas[h] = pinv_psd(x.T @ x / n) @ (x.T @ y / n)
        nxt = features.at_data_policy(ds, h, pi) @ thetas[h]
    # after the loop ``nxt`` holds phi(s_1^i, pi)^T theta_1
    return FqeSolution(tuple(thetas), float(nxt.mean()), "fqe_linear")


def fqe_tabular(ds: TrajectoryDataset, pi) -> FqeSolution:
    """Per-cell averaging of Bellman targets; unvisited cells get value 0."""
    H, n, A = ds.horizon, ds.n, ds.num_actions
    tables = [None] * (H + 1)
    visited = [None] * (H + 1)
    nxt = np.zeros(n)
    for h in range(H, 0, -1):
        S = ds.states_per_level[h]
        cells = ds.cells(h)
        counts = np.bincount(cells, minlength=S * A)
        sums = np.bincount(cells, weights=ds.rewards[h] + nxt, minlength=S * A)
        seen = counts > 0
        q = np.zeros(S * A)
        q[seen] = sums[seen] / counts[seen]
        tables[h] = q.reshape(S, A)
        visited[h] = seen.reshape(S, A)
        v = (pi.probs[h] * tables[h]).sum(axis=1)
        nxt = v[ds.local_states(h)]
    return FqeSolution(tuple(tables), float(nxt.mean()), "fqe_tabular", tuple(visited))


def importance_sampling(ds: TrajectoryDataset, pi, pi_b) -> float:
    """Per-decision importance sampling ``sum_h (1/n) sum_i rho_{0:h}^i r_h^i``."""
    ratio = np.ones(ds.n)
    total = 0.0
    for h in range(1, ds.horizon + 1):
        s, a = ds.local_states(h), ds.actions[h]
        pb = pi_b.probs[h][s, a]
        if np.any(pb <= 0):
            bad = int(np.flatnonzero(pb <= 0)[0])
            raise ValidationError(f"behavior probability is zero for a logged action "
                                  f"(trajectory {bad}, level {h})")
        ratio = ratio * pi.probs[h][s, a] / pb
        total += float(np.mean(ratio * ds.rewards[h]))
    return total
