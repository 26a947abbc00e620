"""Layered finite-horizon MDPs, policies, exact dynamic-programming oracles and sampling.

State ids are global integers partitioned by level: level ``h`` owns the
contiguous block ``[offsets[h], offsets[h] + states_per_level[h])``. Every
per-level array is indexed by the *local* id ``s - offsets[h]``.

Level 0 holds the fixed dummy pair ``(s0, a0) = (0, 0)`` with zero reward.
Actions other than ``a0`` at level 0 are inadmissible; policies must put all
their level-0 mass on ``a0``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ValidationError

PROB_ATOL = 1e-12
NOISE_FAMILIES = ("gaussian", "bernoulli", "none")


def _frozen(arr, dtype=float):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_distribution_rows(arr, what):
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValidationError(f"{what}: entries must be finite and nonnegative")
    sums = arr.sum(axis=-1)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=PROB_ATOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValidationError(f"{what}: rows must sum to 1 (max deviation {worst:.3e})")


def _digest(*arrays, extra=""):
    h = hashlib.sha256(extra.encode())
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.astype("<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class RewardNoise:
    """Reward noise around the mean, always supported on ``[0, r_max]``.

    ``gaussian`` is a Gaussian of scale ``scale`` centred at the mean and
    truncated symmetrically to ``[m - c, m + c]`` with ``c = min(m, r_max - m)``,
    so the conditional mean is exactly ``m``. ``bernoulli`` draws
    ``r_max * Bernoulli(m / r_max)``. ``none`` returns the mean.
    """

    family: str = "gaussian"
    scale: float = 0.25

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValidationError(f"unknown noise family {self.family!r}")
        if not self.scale >= 0:
            raise ValidationError("noise scale must be nonnegative")

    def draw(self, mean, u, r_max):
        """Inverse-CDF draw from uniforms ``u`` (same shape as ``mean``)."""
        mean = np.asarray(mean, dtype=float)
        if self.family == "none" or (self.family == "gaussian" and self.scale == 0):
            return mean.copy()
        if self.family == "bernoulli":
            return np.where(u < mean / r_max, r_max, 0.0)
        half = np.minimum(mean, r_max - mean)
        lo = ndtr(-half / self.scale)
        hi = ndtr(half / self.scale)
        r = mean + self.scale * ndtri(lo + u * (hi - lo))
        return np.clip(r, mean - half, mean + half)


@dataclass(frozen=True, eq=False)
class LayeredMDP:
    """Exact layered MDP.

    Parameters
    ----------
    transitions : sequence of H arrays
        ``transitions[h]`` has shape ``(S_h, A, S_{h+1})``.
    reward_mean : sequence of H+1 arrays
        ``reward_mean[h]`` has shape ``(S_h, A)`` with entries in ``[0, r_max]``;
        level 0 must be identically zero.
    r_max : float
        Per-step reward bound, so ``V_max = H * r_max``.
    noise : RewardNoise
    """

    transitions: tuple
    reward_mean: tuple
    r_max: float = 1.0
    noise: RewardNoise = field(default_factory=RewardNoise)

    def __post_init__(self):
        rewards = tuple(_frozen(r) for r in self.reward_mean)
        trans = tuple(_frozen(p) for p in self.transitions)
        object.__setattr__(self, "reward_mean", rewards)
        object.__setattr__(self, "transitions", trans)
        if not self.r_max > 0:
            raise ValidationError("r_max must be positive")
        H = len(rewards) - 1
        if H < 1:
            raise ValidationError("horizon must be at least 1")
        if len(trans) != H:
            raise ValidationError(f"expected {H} transition tensors, got {len(trans)}")
        if rewards[0].shape[0] != 1:
            raise ValidationError("level 0 must have exactly one state")
        A = rewards[0].shape[1]
        for h, r in enumerate(rewards):
            if r.ndim != 2 or r.shape[1] != A:
                raise ValidationError(f"reward_mean[{h}] must have shape (S_{h}, {A})")
            if np.any(r < 0) or np.any(r > self.r_max):
                raise ValidationError(f"reward_mean[{h}] outside [0, r_max]")
        if np.any(rewards[0] != 0):
            raise ValidationError("level-0 rewards must be identically zero")
        for h, p in enumerate(trans):
            expect = (rewards[h].shape[0], A, rewards[h + 1].shape[0])
            if p.shape != expect:
                raise ValidationError(f"transitions[{h}] has shape {p.shape}, expected {expect}")
            _check_distribution_rows(p, f"transitions[{h}]")

    @property
    def horizon(self):
        return len(self.reward_mean) - 1

    @property
    def num_actions(self):
        return self.reward_mean[0].shape[1]

    @property
    def states_per_level(self):
        return tuple(r.shape[0] for r in self.reward_mean)

    @property
    def offsets(self):
        return tuple(np.concatenate([[0], np.cumsum(self.states_per_level)[:-1]]).astype(int))

    @property
    def v_max(self):
        return self.horizon * self.r_max

    def digest(self):
        return _digest(*self.reward_mean, *self.transitions,
                       extra=f"{self.r_max}|{self.noise.family}|{self.noise.scale}")


@dataclass(frozen=True, eq=False)
class Policy:
    """Per-level action distributions ``probs[h][s_local, a]`` for ``h = 0..H``."""

    probs: tuple

    def __post_init__(self):
        probs = tuple(_frozen(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if len(probs) < 2:
            raise ValidationError("a policy needs levels 0..H with H >= 1")
        A = probs[0].shape[-1]
        for h, p in enumerate(probs):
            if p.ndim != 2 or p.shape[1] != A:
                raise ValidationError(f"policy level {h} must have shape (S_{h}, {A})")
            _check_distribution_rows(p, f"policy level {h}")
        if probs[0].shape[0] != 1 or probs[0][0, 0] != 1.0:
            raise ValidationError("level-0 policy must put all mass on the dummy action a0 = 0")

    @property
    def horizon(self):
        return len(self.probs) - 1

    @property
    def num_actions(self):
        return self.probs[0].shape[1]

    @property
    def states_per_level(self):
        return tuple(p.shape[0] for p in self.probs)

    def digest(self):
        return _digest(*self.probs)


def _level0(num_actions):
    row = np.zeros((1, num_actions))
    row[0, 0] = 1.0
    return row


def uniform_policy(states_per_level: Sequence[int], num_actions: int) -> Policy:
    probs = [_level0(num_actions)]
    probs += [np.full((s, num_actions), 1.0 / num_actions) for s in states_per_level[1:]]
    return Policy(tuple(probs))


def softmax_policy(states_per_level, num_actions, temperature=1.0, seed=0) -> Policy:
    """Softmax of a random ``U(0, 1)`` score table; lower temperature is greedier."""
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    rng = np.random.default_rng(seed)
    probs = [_level0(num_actions)]
    for s in states_per_level[1:]:
        z = rng.random((s, num_actions)) / temperature
        z = np.exp(z - z.max(axis=1, keepdims=True))
        probs.append(z / z.sum(axis=1, keepdims=True))
    return Policy(tuple(probs))


def epsilon_mix(base: Policy, epsilon: float) -> Policy:
    """``(1 - eps) * base + eps * uniform`` at every level ``h >= 1``."""
    if not 0 <= epsilon <= 1:
        raise ValidationError("epsilon must lie in [0, 1]")
    A = base.num_actions
    probs = [base.probs[0]] + [(1 - epsilon) * p + epsilon / A for p in base.probs[1:]]
    return Policy(tuple(probs))


def deterministic_policy(choices: Sequence[Sequence[int]], num_actions: int) -> Policy:
    """Point-mass policy; ``choices[h-1][s_local]`` is the action at level ``h``."""
    probs = [_level0(num_actions)]
    for level in choices:
        level = np.asarray(level, dtype=int)
        p = np.zeros((len(level), num_actions))
        p[np.arange(len(level)), level] = 1.0
        probs.append(p)
    return Policy(tuple(probs))


def check_compatible(mdp: LayeredMDP, pi: Policy):
    if pi.states_per_level != mdp.states_per_level or pi.num_actions != mdp.num_actions:
        raise ValidationError(
            f"policy layout {pi.states_per_level}x{pi.num_actions} does not match "
            f"MDP layout {mdp.states_per_level}x{mdp.num_actions}")


def exact_q(mdp: LayeredMDP, pi: Policy):
    """Backward Bellman recursion; returns a tuple of ``(S_h, A)`` arrays for ``h = 0..H``."""
    check_compatible(mdp, pi)
    H = mdp.horizon
    q = [None] * (H + 1)
    q[H] = mdp.reward_mean[H].copy()
    for h in range(H - 1, -1, -1):
        v_next = (pi.probs[h + 1] * q[h + 1]).sum(axis=1)
        q[h] = mdp.reward_mean[h] + mdp.transitions[h] @ v_next
    return tuple(q)


def exact_occupancy(mdp: LayeredMDP, pi: Policy):
    """Forward flow of state-action occupancies ``d_h(s, a)`` for ``h = 0..H``."""
    check_compatible(mdp, pi)
    d = [np.zeros((1, mdp.num_actions))]
    d[0][0, 0] = 1.0
    for h in range(mdp.horizon):
        state_mass = np.einsum("sa,sat->t", d[h], mdp.transitions[h])
        d.append(state_mass[:, None] * pi.probs[h + 1])
    return tuple(d)


def exact_return(mdp: LayeredMDP, pi: Policy) -> float:
    return float(exact_q(mdp, pi)[0][0, 0])


def return_from_occupancy(mdp: LayeredMDP, pi: Policy) -> float:
    """``sum_h E_{d_h}[R]``; an independent route to ``J(pi)``."""
    d = exact_occupancy(mdp, pi)
    return float(sum((dh * r).sum() for dh, r in zip(d, mdp.reward_mean)))


def _inverse_cdf(rows, u):
    cum = np.cumsum(rows, axis=1)
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, rows.shape[1] - 1)


def uniform_stream(seed: int, n: int, horizon: int):
    """Uniforms driving :func:`sample_trajectories`, shape ``(n, H+1, 3)``.

    Generated by Philox-4x64 keyed directly by ``seed`` with counter 0 and read
    in C order, so trajectory ``i`` always consumes the block of ``3 (H+1)``
    doubles starting at position ``3 (H+1) i``: slot 0 picks the action, slot 1
    the reward noise and slot 2 the next state.
    """
    if seed < 0:
        raise ValidationError("seed must be a nonnegative integer")
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    return gen.random((n, horizon + 1, 3))


def sample_trajectories(mdp: LayeredMDP, behavior: Policy, n: int, seed: int):
    """Draw ``n`` i.i.d. trajectories under ``behavior``; bit-reproducible in ``seed``."""
    from .datasets import TrajectoryDataset

    check_compatible(mdp, behavior)
    if n < 1:
        raise ValidationError("n must be at least 1")
    H, A = mdp.horizon, mdp.num_actions
    u = uniform_stream(seed, n, H)
    offsets = mdp.offsets
    states = np.zeros((H + 1, n), dtype=np.int64)
    actions = np.zeros((H + 1, n), dtype=np.int64)
    rewards = np.zeros((H + 1, n))
    local = np.zeros(n, dtype=np.int64)
    for h in range(H + 1):
        states[h] = local + offsets[h]
        if h > 0:
            actions[h] = _inverse_cdf(behavior.probs[h][local], u[:, h, 0])
            mean = mdp.reward_mean[h][local, actions[h]]
            rewards[h] = mdp.noise.draw(mean, u[:, h, 1], mdp.r_max)
        if h < H:
            local = _inverse_cdf(mdp.transitions[h][local, actions[h]], u[:, h, 2])
    provenance = {"mdp": mdp.digest(), "behavior": behavior.digest(), "seed": int(seed),
                  "generator": "philox4x64"}
    return TrajectoryDataset(states, actions, rewards, mdp.states_per_level, A, provenance)


# --- JSON serialization -------------------------------------------------------

def mdp_to_dict(mdp: LayeredMDP) -> dict:
    levels = []
    for h in range(mdp.horizon + 1):
        levels.append({
            "states": mdp.states_per_level[h],
            "rewards": mdp.reward_mean[h].tolist(),
            "transitions": mdp.transitions[h].tolist() if h < mdp.horizon else None,
        })
    return {"horizon": mdp.horizon, "actions": mdp.num_actions, "r_max": mdp.r_max,
            "noise": {"family": mdp.noise.family, "scale": mdp.noise.scale},
            "levels": levels}


def mdp_from_dict(doc: dict) -> LayeredMDP:
    try:
        levels = doc["levels"]
        rewards = [np.array(lv["rewards"], dtype=float) for lv in levels]
        trans = [np.array(lv["transitions"], dtype=float) for lv in levels[:-1]]
        noise = RewardNoise(**doc.get("noise", {}))
        mdp = LayeredMDP(tuple(trans), tuple(rewards), float(doc["r_max"]), noise)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed MDP document: {exc}") from exc
    if mdp.horizon != doc["horizon"] or mdp.num_actions != doc["actions"]:
        raise ValidationError("MDP document header disagrees with its levels")
    return mdp


def policy_to_dict(pi: Policy) -> dict:
    return {"actions": pi.num_actions, "levels": [p.tolist() for p in pi.probs]}


def policy_from_dict(doc: dict) -> Policy:
    try:
        return Policy(tuple(np.array(p, dtype=float) for p in doc["levels"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed policy document: {exc}") from exc


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
