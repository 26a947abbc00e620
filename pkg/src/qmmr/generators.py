"""Seeded fixture generators: small MDPs paired with feature maps.

``random_tabular``
    Dirichlet transitions, uniform mean rewards, one-hot features.
``linear_complete``
    A linear MDP: features on the simplex, ``P_h(.|s,a) = sum_k phi_k(s,a) mu_{h,k}``
    and ``R_h = phi^T theta_h``, so every Bellman backup stays in the span.
``misspecified_linear``
    A linear MDP whose transitions are blended with unstructured noise, then
    ``Q^pi`` of the target policy is appended as the last feature coordinate at
    levels ``1..H-1``. The class stays realizable for that policy but loses
    completeness.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diagnostics import check_completeness, realizability_residual
from .errors import ValidationError
from .function_classes import FeatureMap
from .mdp import LayeredMDP, Policy, RewardNoise, exact_q, uniform_policy

KINDS = ("random_tabular", "linear_complete", "misspecified_linear")
POSTCHECK_TOL = 1e-10
MISSPEC_MIN = 1e-3


@dataclass(frozen=True)
class FixtureShape:
    """Layout of a generated fixture.

    ``states`` is either one count used at every level ``1..H`` or a list of
    ``H`` counts. ``dim`` is the feature dimension at levels ``1..H``; it is
    ignored by ``random_tabular``.
    """

    horizon: int
    states: int | tuple = 4
    actions: int = 2
    dim: int = 3
    r_max: float = 1.0
    noise: RewardNoise = field(default_factory=RewardNoise)
    blend: float = 0.5

    def __post_init__(self):
        if self.horizon < 1 or self.actions < 1:
            raise ValidationError("horizon and actions must be positive")
        states = self.states
        states = (states,) * self.horizon if np.isscalar(states) else tuple(states)
        if len(states) != self.horizon or min(states) < 1:
            raise ValidationError("states must give a positive count for each level 1..H")
        object.__setattr__(self, "states", tuple(int(s) for s in states))
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        if not 0 < self.blend <= 1:
            raise ValidationError("blend must lie in (0, 1]")

    @property
    def states_per_level(self):
        return (1,) + self.states

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "noise" in doc and isinstance(doc["noise"], dict):
            doc["noise"] = RewardNoise(**doc["noise"])
        return cls(**doc)


def _check_feasible(shape: FixtureShape, kind):
    if kind not in KINDS:
        raise ValidationError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    if kind == "random_tabular":
        return
    for h, s in enumerate(shape.states, start=1):
        if shape.dim > s * shape.actions:
            raise ValidationError(f"dim {shape.dim} exceeds |S_{h}||A| = {s * shape.actions}")
    if kind == "misspecified_linear" and (shape.dim < 2 or shape.horizon < 2):
        raise ValidationError("misspecified_linear needs dim >= 2 and horizon >= 2")
    if kind == "misspecified_linear" and shape.dim >= min(shape.states[1:]) * shape.actions:
        # features spanning every function at some level h >= 2 leave nothing to misspecify
        raise ValidationError("misspecified_linear needs dim < |S_h||A| for levels h >= 2")


def _dirichlet(rng, size, k):
    return rng.dirichlet(np.ones(k), size=size)


def _level0_transition(rng, A, s1):
    row = _dirichlet(rng, None, s1)
    return np.broadcast_to(row, (1, A, s1)).copy()


def _random_tabular(shape, rng):
    A, spl = shape.actions, shape.states_per_level
    H = shape.horizon
    trans = [_level0_transition(rng, A, spl[1])]
    trans += [_dirichlet(rng, (spl[h], A), spl[h + 1]) for h in range(1, H)]
    rewards = [np.zeros((1, A))] + [shape.r_max * rng.random((spl[h], A)) for h in range(1, H + 1)]
    mdp = LayeredMDP(tuple(trans), tuple(rewards), shape.r_max, shape.noise)
    return mdp, FeatureMap.one_hot(spl, A)


def _linear_mdp(shape, rng, dims):
    """Simplex features, factored transitions and linear rewards; ``dims[h-1]`` is the level-h dimension."""
    A, spl, H = shape.actions, shape.states_per_level, shape.horizon
    phis = [np.ones((1, A, 1))]
    for h in range(1, H + 1):
        phis.append(_dirichlet(rng, (spl[h], A), dims[h - 1]))
    trans = [_level0_transition(rng, A, spl[1])]
    for h in range(1, H):
        mu = _dirichlet(rng, dims[h - 1], spl[h + 1])          # (d_h, S_{h+1})
        trans.append(phis[h] @ mu)
    rewards = [np.zeros((1, A))]
    for h in range(1, H + 1):
        theta = shape.r_max * rng.random(dims[h - 1])
        rewards.append(np.clip(phis[h] @ theta, 0.0, shape.r_max))
    return trans, rewards, phis


def _normalize_rows(p):
    return p / p.sum(axis=-1, keepdims=True)


def generate_mdp(kind: str, shape: FixtureShape, seed: int, target: Policy | None = None):
    """Build ``(LayeredMDP, FeatureMap)`` for the given fixture kind.

    ``target`` only matters for ``misspecified_linear``, whose added feature is
    ``Q^target``; it defaults to the uniform policy. Generated fixtures are
    post-checked: realizability residual ``<= 1e-10`` for every kind,
    completeness residual ``<= 1e-10`` for the complete kinds and ``> 1e-3``
    for the misspecified one.
    """
    if isinstance(shape, dict):
        shape = FixtureShape.from_dict(shape)
    _check_feasible(shape, kind)
    rng = np.random.default_rng(seed)
    spl, A, H = shape.states_per_level, shape.actions, shape.horizon
    if target is None:
        target = uniform_policy(spl, A)
    if target.states_per_level != spl or target.num_actions != A:
        raise ValidationError("target policy layout does not match the fixture shape")

    if kind == "random_tabular":
        mdp, features = _random_tabular(shape, rng)
    elif kind == "linear_complete":
        trans, rewards, phis = _linear_mdp(shape, rng, [shape.dim] * H)
        mdp = LayeredMDP(tuple(_normalize_rows(p) for p in trans), tuple(rewards),
                         shape.r_max, shape.noise)
        features = FeatureMap(tuple(phis))
    else:
        # Q_H is the reward, already in the span, so the last level keeps a full base
        trans, rewards, phis = _linear_mdp(shape, rng, [shape.dim - 1] * (H - 1) + [shape.dim])
        for h in range(1, H):
            noise = _dirichlet(rng, (spl[h], A), spl[h + 1])
            trans[h] = (1 - shape.blend) * trans[h] + shape.blend * noise
        mdp = LayeredMDP(tuple(_normalize_rows(p) for p in trans), tuple(rewards),
                         shape.r_max, shape.noise)
        q = exact_q(mdp, target)
        aug = [phis[0]] + [np.concatenate([phis[h], _orthogonal_part(phis[h], q[h])], axis=2)
                           for h in range(1, H)] + [phis[H]]
        features = FeatureMap(tuple(aug))

    _postcheck(kind, mdp, features, target)
    return mdp, features


def _orthogonal_part(phi, q):
    """Unit-scale column spanning ``q`` together with ``phi``, kept well conditioned."""
    x, y = phi.reshape(-1, phi.shape[-1]), q.ravel()
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    if np.abs(resid).max() <= 1e-8 * max(np.abs(y).max(), 1.0):
        resid = y                       # q already in the span; any copy keeps realizability
    resid = resid / np.abs(resid).max()
    return resid.reshape(q.shape)[:, :, None]


def _postcheck(kind, mdp, features, target):
    real = realizability_residual(mdp, target, features)
    if real > POSTCHECK_TOL:
        raise RuntimeError(f"generator post-check: realizability residual {real:.3e}")
    worst = max(check_completeness(mdp, target, features, h) for h in range(1, mdp.horizon + 1))
    if kind == "misspecified_linear":
        if worst <= MISSPEC_MIN:
            raise RuntimeError(f"generator post-check: misspecified fixture is complete ({worst:.3e})")
    elif worst > POSTCHECK_TOL:
        raise RuntimeError(f"generator post-check: completeness residual {worst:.3e}")
