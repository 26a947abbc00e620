"""Trajectory datasets and the count-based empirical MDP."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """``n`` trajectories stored level-major: ``states[h]`` is a contiguous length-``n`` row.

    State ids are global (see :mod:`qmmr.mdp`); ``local_states(h)`` gives the
    per-level index used by every table.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    states_per_level: tuple
    num_actions: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, np.int64))
        object.__setattr__(self, "actions", _frozen(self.actions, np.int64))
        object.__setattr__(self, "rewards", _frozen(self.rewards, float))
        object.__setattr__(self, "states_per_level", tuple(int(s) for s in self.states_per_level))
        shape = self.states.shape
        if self.actions.shape != shape or self.rewards.shape != shape:
            raise ValidationError("states, actions and rewards must share shape (H+1, n)")
        if shape[0] != len(self.states_per_level) or shape[1] < 1:
            raise ValidationError("dataset needs H+1 levels and at least one trajectory")
        if np.any(self.rewards[0] != 0):
            raise ValidationError("r_0 must be zero for every trajectory")
        if np.any(self.actions[0] != 0):
            raise ValidationError("a_0 must be the dummy action 0")
        if np.any(self.actions < 0) or np.any(self.actions >= self.num_actions):
            raise ValidationError("action ids out of range")
        for h in range(shape[0]):
            loc = self.states[h] - self.offsets[h]
            if np.any(loc < 0) or np.any(loc >= self.states_per_level[h]):
                raise ValidationError(f"state ids at slot {h} do not belong to level {h}")

    @property
    def n(self):
        return self.states.shape[1]

    @property
    def horizon(self):
        return self.states.shape[0] - 1

    @property
    def offsets(self):
        return tuple(np.concatenate([[0], np.cumsum(self.states_per_level)[:-1]]).astype(int))

    def local_states(self, h):
        return self.states[h] - self.offsets[h]

    def cells(self, h):
        """Flat cell index ``s_local * A + a`` of every datapoint at level ``h``."""
        return self.local_states(h) * self.num_actions + self.actions[h]

    def returns(self):
        return self.rewards[1:].sum(axis=0)


def concatenate(*datasets: TrajectoryDataset) -> TrajectoryDataset:
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.states_per_level != first.states_per_level or ds.num_actions != first.num_actions:
            raise ValidationError("cannot concatenate datasets with different layouts")
    return TrajectoryDataset(
        np.concatenate([d.states for d in datasets], axis=1),
        np.concatenate([d.actions for d in datasets], axis=1),
        np.concatenate([d.rewards for d in datasets], axis=1),
        first.states_per_level, first.num_actions,
        {"concatenated": [d.provenance for d in datasets]},
    )


def empirical_expectation(ds: TrajectoryDataset, h: int, g) -> float:
    """``(1/n) sum_i g(s_h^i, a_h^i)`` with ``g`` called on local state and action arrays."""
    vals = np.asarray(g(ds.local_states(h), ds.actions[h]), dtype=float)
    return float(np.broadcast_to(vals, (ds.n,)).mean())


@dataclass(frozen=True, eq=False)
class EmpiricalMDP:
    """Counts and frequencies per level.

    ``reward[h]`` and ``transition[h]`` are NaN on unvisited cells; ``visited[h]``
    flags which cells have data.
    """

    counts: tuple
    transition_counts: tuple
    reward: tuple
    transition: tuple
    marginal: tuple
    visited: tuple
    n: int

    @property
    def horizon(self):
        return len(self.counts) - 1

    @property
    def num_actions(self):
        return self.counts[0].shape[1]

    @property
    def states_per_level(self):
        return tuple(c.shape[0] for c in self.counts)

    def full_support(self):
        """True when every admissible cell at levels ``1..H`` was visited."""
        return all(v.all() for v in self.visited[1:])

    def unvisited(self):
        return {h: np.argwhere(~self.visited[h]).tolist() for h in range(1, self.horizon + 1)
                if not self.visited[h].all()}

    def occupancy(self, pi):
        """Occupancy of ``pi`` in the empirical MDP; mass reaching an unvisited cell is dropped."""
        d = [np.zeros((1, self.num_actions))]
        d[0][0, 0] = 1.0
        for h in range(self.horizon):
            p = np.nan_to_num(self.transition[h])
            state_mass = np.einsum("sa,sat->t", d[h], p)
            d.append(state_mass[:, None] * pi.probs[h + 1])
        return tuple(d)

    def value(self, pi) -> float:
        """Certainty-equivalence return ``sum_h sum_{s,a} d_h(s,a) r_h(s,a)``."""
        d = self.occupancy(pi)
        return float(sum((dh * np.nan_to_num(r)).sum() for dh, r in zip(d[1:], self.reward[1:])))

    def to_mdp(self, r_max, noise=None):
        """The empirical model as a :class:`~qmmr.mdp.LayeredMDP`; requires full support."""
        from .mdp import LayeredMDP, RewardNoise

        if not self.full_support():
            raise ValidationError(f"unvisited cells {self.unvisited()}; empirical MDP is undefined there")
        trans = []
        for h in range(self.horizon):
            p = np.array(self.transition[h])
            if h == 0:
                p[0, 1:] = p[0, 0]  # inadmissible level-0 actions copy a0
            trans.append(p)
        rewards = [np.zeros_like(self.reward[0])] + [np.array(r) for r in self.reward[1:]]
        return LayeredMDP(tuple(trans), tuple(rewards), r_max, noise or RewardNoise("none"))


def build_empirical_mdp(ds: TrajectoryDataset) -> EmpiricalMDP:
    H, A, n = ds.horizon, ds.num_actions, ds.n
    counts, tcounts, reward, trans, marg, visited = [], [], [], [], [], []
    for h in range(H + 1):
        S = ds.states_per_level[h]
        cell = ds.cells(h)
        c = np.bincount(cell, minlength=S * A).reshape(S, A).astype(float)
        rsum = np.bincount(cell, weights=ds.rewards[h], minlength=S * A).reshape(S, A)
        seen = c > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            reward.append(np.where(seen, rsum / c, np.nan))
        counts.append(c)
        marg.append(c / n)
        visited.append(seen)
        if h < H:
            S_next = ds.states_per_level[h + 1]
            flat = cell * S_next + ds.local_states(h + 1)
            tc = np.bincount(flat, minlength=S * A * S_next).reshape(S, A, S_next).astype(float)
            tcounts.append(tc)
            with np.errstate(invalid="ignore", divide="ignore"):
                trans.append(np.where(seen[:, :, None], tc / c[:, :, None], np.nan))
    return EmpiricalMDP(tuple(counts), tuple(tcounts), tuple(reward), tuple(trans),
                        tuple(marg), tuple(visited), n)


# --- file formats -------------------------------------------------------------

def save_jsonl(ds: TrajectoryDataset, path):
    """Header line with layout and provenance, then one ``{s, a, r}`` object per trajectory."""
    header = {"provenance": ds.provenance, "states_per_level": list(ds.states_per_level),
              "actions": ds.num_actions, "n": ds.n}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(ds.n):
            row = {"s": ds.states[:, i].tolist(), "a": ds.actions[:, i].tolist(),
                   "r": ds.rewards[:, i].tolist()}
            fh.write(json.dumps(row) + "\n")


def load_jsonl(path) -> TrajectoryDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows:
        raise ValidationError(f"{path}: no trajectories")
    s = np.array([r["s"] for r in rows]).T
    a = np.array([r["a"] for r in rows]).T
    r = np.array([r["r"] for r in rows], dtype=float).T
    return TrajectoryDataset(s, a, r, tuple(header["states_per_level"]), header["actions"],
                             header.get("provenance", {}))


def save_csv(ds: TrajectoryDataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "h", "s", "a", "r"])
        for i in range(ds.n):
            for h in range(ds.horizon + 1):
                writer.writerow([i, h, int(ds.states[h, i]), int(ds.actions[h, i]),
                                 repr(float(ds.rewards[h, i]))])
