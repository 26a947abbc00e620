"""Population-side quantities computed by exact enumeration over small MDPs.

Everything here is an expectation under exact occupancies, so the linear
identities relating covariances, the feature dynamical system and the
population weights can be checked to machine precision.

Notation, per level ``h``:

* ``Sigma_h = E_D[phi phi^T]`` and ``Sigma_cr_h = E_D[phi_h (phi_{h+1}^pi)^T]``
* ``B_h = Sigma_cr_h^T Sigma_h^+`` and ``psi_{h+1} = B_h psi_h`` with
  ``psi_1 = E_D[phi(s_1, pi)]``
* ``w*_h(s, a) = phi(s, a)^T alpha_h`` with ``alpha_h = Sigma_h^+ psi_h``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import inv_sqrt_psd, is_singular, mahalanobis, pinv_psd, range_projector
from .errors import ValidationError
from .function_classes import FeatureMap
from .mdp import LayeredMDP, Policy, check_compatible, exact_occupancy, exact_q

RANGE_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class PopulationDiagnostics:
    """Feature dynamics of ``pi`` under data distribution ``d^D`` (all tuples indexed by level).

    ``sigma_cr`` and ``b`` have ``H`` entries (levels ``0..H-1``); the rest
    have ``H+1``. Level 0 uses ``psi_0 = phi(s0, a0)``.
    """

    features: FeatureMap
    d_data: tuple
    d_pi: tuple
    sigma: tuple
    sigma_cr: tuple
    b: tuple
    psi: tuple
    alpha: tuple
    mean_pi: tuple
    singular: tuple

    @property
    def horizon(self):
        return len(self.sigma) - 1


def _expect(d, phi):
    """``sum_{s,a} d(s,a) phi(s,a)`` for ``d`` of shape (S, A) and ``phi`` of shape (S, A, k)."""
    return np.einsum("sa,sak->k", d, phi)


def compute_feature_dynamics(mdp: LayeredMDP, pi: Policy, pi_b: Policy,
                             features: FeatureMap) -> PopulationDiagnostics:
    check_compatible(mdp, pi)
    check_compatible(mdp, pi_b)
    features.check_layout(mdp.states_per_level, mdp.num_actions)
    H = mdp.horizon
    d_data = exact_occupancy(mdp, pi_b)
    d_pi = exact_occupancy(mdp, pi)
    phis = features.arrays

    sigma = [np.einsum("sa,saj,sak->jk", d_data[h], phis[h], phis[h]) for h in range(H + 1)]
    sigma_cr, b = [], []
    for h in range(H):
        phi_next_pi = features.policy_average(h + 1, pi)            # (S', d')
        expected_next = mdp.transitions[h] @ phi_next_pi             # (S, A, d')
        cr = np.einsum("sa,saj,sak->jk", d_data[h], phis[h], expected_next)
        sigma_cr.append(cr)
        b.append(cr.T @ pinv_psd(sigma[h]))

    psi = [phis[0][0, 0].copy()]
    state_mass_1 = d_data[1].sum(axis=1)
    psi.append(state_mass_1 @ features.policy_average(1, pi))
    for h in range(1, H):
        psi.append(b[h] @ psi[h])
    alpha = tuple(pinv_psd(sigma[h]) @ psi[h] for h in range(H + 1))
    mean_pi = tuple(_expect(d_pi[h], phis[h]) for h in range(H + 1))
    singular = tuple(is_singular(s) for s in sigma)
    return PopulationDiagnostics(features, d_data, d_pi, tuple(sigma), tuple(sigma_cr),
                                 tuple(b), tuple(psi), alpha, mean_pi, singular)


@dataclass(frozen=True, eq=False)
class PopulationWeights:
    """``w*_h`` as coefficient vectors and as full ``(S_h, A)`` tables."""

    alpha: tuple
    tables: tuple

    def __call__(self, h, s, a):
        return self.tables[h][s, a]

    def at_data(self, ds, h):
        return self.tables[h][ds.local_states(h), ds.actions[h]]


def population_weights_linear(diag: PopulationDiagnostics, features: FeatureMap | None = None):
    features = features or diag.features
    tables = tuple(features.arrays[h] @ diag.alpha[h] for h in range(diag.horizon + 1))
    return PopulationWeights(diag.alpha, tables)


def coverage_norms(diag: PopulationDiagnostics):
    """Per level: ``||psi||_{Sigma^-1}``, ``||E_{d^pi}[phi]||_{Sigma^-1}`` and ``||w*||_{2,d^D}``.

    The last one is computed by quadrature over ``d^D``, independently of the
    first.
    """
    wstar = population_weights_linear(diag)
    out = []
    for h in range(diag.horizon + 1):
        quad = float(np.sqrt(np.sum(diag.d_data[h] * wstar.tables[h] ** 2)))
        out.append({"psi": mahalanobis(diag.psi[h], diag.sigma[h]),
                    "dpi": mahalanobis(diag.mean_pi[h], diag.sigma[h]),
                    "wstar": quad})
    return out


def leverage_constant(mdp: LayeredMDP, pi_b: Policy, features: FeatureMap, h: int) -> float:
    """``kappa_h = max_{s,a} phi^T Sigma_h^+ phi``; ``inf`` if some feature leaves the range of ``Sigma_h``."""
    d = exact_occupancy(mdp, pi_b)[h]
    phi = features.arrays[h]
    sigma = np.einsum("sa,saj,sak->jk", d, phi, phi)
    flat = phi.reshape(-1, phi.shape[2])
    if h == 0:
        flat = flat[:1]  # only (s0, a0) is admissible
    outside = flat - flat @ range_projector(sigma)
    scale = np.maximum(np.linalg.norm(flat, axis=1), 1.0)
    if np.any(np.linalg.norm(outside, axis=1) > RANGE_TOL * scale):
        return float("inf")
    return float(np.max(np.einsum("ij,jk,ik->i", flat, pinv_psd(sigma), flat)))


def rho_upper_bound(diag: PopulationDiagnostics, t: int, h: int) -> float:
    """``sup_{s_t,a_t} ||Sigma_h^{-1/2} B_{h-1} ... B_t phi(s_t, a_t)||_2``; 1 when ``t == h``."""
    if not 0 <= t <= h <= diag.horizon:
        raise ValidationError("need 0 <= t <= h <= H")
    if t == h:
        return 1.0
    m = inv_sqrt_psd(diag.sigma[h])
    for k in range(h - 1, t - 1, -1):
        m = m @ diag.b[k]
    flat = diag.features.flat(t)
    if t == 0:
        flat = flat[:1]
    return float(np.max(np.linalg.norm(flat @ m.T, axis=1)))


def inf_operator_norm(m) -> float:
    """``sup_{||f||_inf <= 1} ||M f||_inf``: the largest row l1 norm."""
    m = np.asarray(m, dtype=float)
    return float(np.abs(m).sum(axis=1).max())


def policy_transition_matrix(mdp: LayeredMDP, pi: Policy, h: int):
    """``(S_h A) x (S_{h+1} A)`` matrix of ``P(s'|s,a) pi(a'|s')``."""
    p = mdp.transitions[h]
    S, A, S2 = p.shape
    return (p[:, :, :, None] * pi.probs[h + 1][None, None]).reshape(S * A, S2 * A)


def rho_exact_tabular(mdp: LayeredMDP, pi: Policy, pi_b: Policy, t: int, h: int) -> float:
    """Exact ``rho_{t:h}`` for one-hot features, where each backup is a conditional expectation."""
    if not 0 <= t <= h <= mdp.horizon:
        raise ValidationError("need 0 <= t <= h <= H")
    d = exact_occupancy(mdp, pi_b)
    for k in range(max(t, 1), h + 1):
        if np.any(d[k] <= 0):
            raise ValidationError(f"d^D has zero mass on some cell at level {k}")
    if t == h:
        return 1.0
    m = policy_transition_matrix(mdp, pi, t)
    for k in range(t + 1, h):
        m = m @ policy_transition_matrix(mdp, pi, k)
    if t == 0:
        m = m[:1]
    return inf_operator_norm(m)


def _weighted_residual(target, basis, weights):
    """Relative residual of the weighted least-squares projection of ``target`` on ``basis``."""
    sw = np.sqrt(weights)
    a, y = basis * sw[:, None], target * sw
    norm = np.linalg.norm(y)
    if norm == 0:
        return 0.0
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(np.linalg.norm(y - a @ coef) / norm)


def check_completeness(mdp: LayeredMDP, pi: Policy, features: FeatureMap, h: int,
                       pi_b: Policy | None = None) -> float:
    """Largest relative residual of ``T^pi f`` projected on ``span(phi_h)``.

    ``f`` ranges over the basis directions ``e_j`` of level ``h+1`` (and the
    zero function, so the reward alone is tested). Projections are weighted by
    ``d_h^D`` when ``pi_b`` is given and uniformly over admissible cells
    otherwise. At ``h = H`` only the reward is tested.
    """
    check_compatible(mdp, pi)
    H = mdp.horizon
    if not 0 <= h <= H:
        raise ValidationError("h out of range")
    basis = features.flat(h)
    if pi_b is not None:
        weights = exact_occupancy(mdp, pi_b)[h].ravel()
    else:
        weights = np.ones(basis.shape[0])
        if h == 0:
            weights[1:] = 0.0
    reward = mdp.reward_mean[h].ravel()
    targets = [reward]
    if h < H:
        nxt = mdp.transitions[h].reshape(-1, mdp.states_per_level[h + 1]) @ features.policy_average(h + 1, pi)
        targets += [reward + nxt[:, j] for j in range(nxt.shape[1])]
    return max(_weighted_residual(g, basis, weights) for g in targets)


def realizability_residual(mdp: LayeredMDP, pi: Policy, features: FeatureMap) -> float:
    """Max over levels of the absolute least-squares residual of ``Q^pi_h`` on ``span(phi_h)``."""
    q = exact_q(mdp, pi)
    worst = 0.0
    for h in range(mdp.horizon + 1):
        basis, y = features.flat(h), q[h].ravel()
        if h == 0:
            basis, y = basis[:1], y[:1]
        coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
        worst = max(worst, float(np.max(np.abs(y - basis @ coef))))
    return worst


def tracking_error(weights, wstar: PopulationWeights, ds) -> np.ndarray:
    """``Delta_h = ||w_hat_h - w*_h|_n||_[n]`` for ``h = 0..H``."""
    w = weights.weights if hasattr(weights, "weights") else np.asarray(weights)
    if w.shape != (ds.horizon + 1, ds.n):
        raise ValidationError("weights do not match the dataset")
    return np.array([np.sqrt(np.mean((w[h] - wstar.at_data(ds, h)) ** 2))
                     for h in range(ds.horizon + 1)])


def mis_ratio_exact(mdp: LayeredMDP, pi: Policy, pi_b: Policy, h: int):
    """``(s, a) -> d_h^pi(s, a) / d_h^D(s, a)`` on local state ids; raises on zero ``d_h^D``."""
    num = exact_occupancy(mdp, pi)[h]
    den = exact_occupancy(mdp, pi_b)[h]

    def ratio(s, a):
        s, a = np.asarray(s), np.asarray(a)
        dd = den[s, a]
        if np.any(dd <= 0):
            raise ValidationError(f"d^D is zero at a queried pair on level {h}")
        return num[s, a] / dd

    return ratio
