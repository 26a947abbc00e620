"""Config-driven experiments behind the ``qmmr`` command line.

A config is one JSON document::

    {
      "fixture": {"kind": "linear_complete", "shape": {"horizon": 3, "states": 4,
                  "actions": 2, "dim": 3}, "seed": 0},
      "behavior": {"type": "uniform"},
      "target": {"type": "softmax", "temperature": 0.5, "seed": 1},
      "estimators": ["qmmr_linear", "fqe_linear"],
      "n_grid": [250, 1000],
      "trials": 20,
      "delta": 0.1,
      "seed": 0,
      "out": "results"
    }

``fixture`` may instead be ``{"dir": path}`` pointing at the output of
``qmmr generate``. Every trial draws its data from a seed derived from
``(seed, n index, trial)``, so trials are independent of scheduling and of
the worker count.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import diagnostics as diag_mod
from ._linalg import is_singular, mahalanobis, pinv_psd, range_projector
from .baselines import fqe_linear, fqe_tabular, importance_sampling
from .datasets import build_empirical_mdp
from .errors import ValidationError
from .function_classes import FeatureMap, LinearClass, TabularClass, gram_matrix, target_moment
from .generators import FixtureShape, generate_mdp
from .matching import MinimaxConfig, run_qmmr, telescoped_sum
from .mdp import (
    Policy, dump_json, epsilon_mix, exact_q, exact_return, load_json, mdp_from_dict,
    mdp_to_dict, policy_from_dict, policy_to_dict, sample_trajectories, softmax_policy,
    uniform_policy,
)

ESTIMATORS = ("qmmr_linear", "qmmr_tabular", "qmmr_minimax", "fqe_linear", "fqe_tabular", "is")
QMMR_ESTIMATORS = ("qmmr_linear", "qmmr_tabular", "qmmr_minimax")


# --- config -------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    fixture: dict
    behavior: dict = field(default_factory=lambda: {"type": "uniform"})
    target: dict = field(default_factory=lambda: {"type": "softmax", "temperature": 0.5, "seed": 1})
    estimators: list = field(default_factory=lambda: ["qmmr_linear", "fqe_linear"])
    n_grid: list = field(default_factory=lambda: [1000])
    trials: int = 10
    delta: float = 0.1
    seed: int = 0
    theta_radius: float = 1.0
    workers: int = 1
    out: str = "results"

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError("trials must be at least 1")
        if not 0 < self.delta < 1:
            raise ValidationError("delta must lie in (0, 1)")
        grid = [int(n) for n in self.n_grid]
        if not grid or min(grid) < 1 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValidationError("n_grid must be a strictly increasing list of positive counts")
        self.n_grid = grid
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")
        if not isinstance(self.fixture, dict) or not ("kind" in self.fixture or "dir" in self.fixture):
            raise ValidationError("fixture needs either 'kind' and 'shape' or 'dir'")
        self.estimators = [_estimator_spec(e) for e in self.estimators]

    @classmethod
    def from_dict(cls, doc, **overrides):
        doc = dict(doc)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _estimator_spec(spec):
    spec = {"name": spec} if isinstance(spec, str) else dict(spec)
    if spec.get("name") not in ESTIMATORS:
        raise ValidationError(f"unknown estimator {spec.get('name')!r}; expected one of {ESTIMATORS}")
    if spec["name"] == "qmmr_minimax":
        if "budget" not in spec:
            raise ValidationError("qmmr_minimax needs a 'budget'")
        MinimaxConfig(spec["budget"], spec.get("iterations", 2000), spec.get("step", "auto"),
                      spec.get("role", "no_regret_on_w"))
    return spec


def build_policy(spec, states_per_level, num_actions) -> Policy:
    kind = spec.get("type")
    if kind == "uniform":
        return uniform_policy(states_per_level, num_actions)
    if kind == "softmax":
        return softmax_policy(states_per_level, num_actions, spec.get("temperature", 1.0),
                              spec.get("seed", 0))
    if kind == "epsilon_mix":
        base = build_policy(spec["base"], states_per_level, num_actions)
        return epsilon_mix(base, spec["epsilon"])
    raise ValidationError(f"unknown policy type {kind!r}")


@dataclass(frozen=True, eq=False)
class Fixture:
    mdp: object
    features: FeatureMap
    behavior: Policy
    target: Policy
    kind: str


def load_fixture(cfg: ExperimentConfig) -> Fixture:
    spec = cfg.fixture
    if "dir" in spec:
        root = spec["dir"]
        try:
            mdp = mdp_from_dict(load_json(os.path.join(root, "mdp.json")))
            features = FeatureMap.from_dict(load_json(os.path.join(root, "features.json")),
                                            mdp.states_per_level, mdp.num_actions)
            behavior = policy_from_dict(load_json(os.path.join(root, "behavior.json")))
            target = policy_from_dict(load_json(os.path.join(root, "target.json")))
            kind = load_json(os.path.join(root, "fixture.json")).get("kind", "custom")
        except FileNotFoundError as exc:
            raise ValidationError(f"fixture directory incomplete: {exc}") from exc
        return Fixture(mdp, features, behavior, target, kind)
    shape = FixtureShape.from_dict(spec.get("shape", {"horizon": 2}))
    spl, A = shape.states_per_level, shape.actions
    behavior = build_policy(cfg.behavior, spl, A)
    target = build_policy(cfg.target, spl, A)
    mdp, features = generate_mdp(spec["kind"], shape, spec.get("seed", 0), target)
    return Fixture(mdp, features, behavior, target, spec["kind"])


def trial_seed(seed, n_index, trial):
    """Independent per-trial key derived from the master seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(n_index), int(trial)))
    return int(ss.generate_state(1, np.uint64)[0])


# --- estimators ---------------------------------------------------------------

def run_estimator(spec, ds, fx: Fixture, delta, theta_radius=1.0):
    """One estimator on one dataset; returns a flat result dict."""
    name = spec["name"]
    v_max = fx.mdp.v_max
    if name in QMMR_ESTIMATORS:
        if name == "qmmr_tabular":
            cls, solver = TabularClass(upper=v_max), None
        else:
            cls = LinearClass(fx.features, theta_radius)
            solver = None
            if name == "qmmr_minimax":
                solver = MinimaxConfig(spec["budget"], spec.get("iterations", 2000),
                                       spec.get("step", "auto"), spec.get("role", "no_regret_on_w"))
        wm, est = run_qmmr(ds, cls, fx.target, solver, v_max=v_max, delta=delta)
        return {"j_hat": est.j_hat, "bound": est.bound, "loss": list(est.losses),
                "second_moment": list(est.second_moments), "eps_stat": list(est.eps_stat)}
    if name == "fqe_linear":
        return {"j_hat": fqe_linear(ds, fx.features, fx.target).j_hat}
    if name == "fqe_tabular":
        return {"j_hat": fqe_tabular(ds, fx.target).j_hat}
    return {"j_hat": importance_sampling(ds, fx.target, fx.behavior)}


def _evaluate_task(args):
    fx, cfg_estimators, n, n_index, trial, seed, delta, theta = args
    s = trial_seed(seed, n_index, trial)
    ds = sample_trajectories(fx.mdp, fx.behavior, n, s)
    return [(spec["name"], n, trial, s, run_estimator(spec, ds, fx, delta, theta))
            for spec in cfg_estimators]


def _map(fn, tasks, workers):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def evaluate(cfg: ExperimentConfig):
    """Run every estimator over ``n_grid x trials``; returns ``(report, rows)``."""
    fx = load_fixture(cfg)
    j_true = exact_return(fx.mdp, fx.target)
    tasks = [(fx, cfg.estimators, n, k, t, cfg.seed, cfg.delta, cfg.theta_radius)
             for k, n in enumerate(cfg.n_grid) for t in range(cfg.trials)]
    rows = []
    for batch in _map(_evaluate_task, tasks, cfg.workers):
        for name, n, trial, seed, res in batch:
            row = {"estimator": name, "n": n, "trial": trial, "seed": seed,
                   "j_hat": res["j_hat"], "j_true": j_true, "error": abs(res["j_hat"] - j_true)}
            if "bound" in res:
                row.update(bound=res["bound"], covered=bool(row["error"] <= res["bound"]),
                           loss=res["loss"], second_moment=res["second_moment"],
                           eps_stat=res["eps_stat"])
            rows.append(row)
    return {"command": "evaluate", "j_true": j_true, "aggregates": aggregate(rows),
            "rows": rows}, rows


def aggregate(rows):
    out = []
    keys = sorted({(r["estimator"], r["n"]) for r in rows}, key=lambda k: (k[0], k[1]))
    for name, n in keys:
        sel = [r for r in rows if r["estimator"] == name and r["n"] == n]
        err = np.array([r["j_hat"] - r["j_true"] for r in sel])
        agg = {"estimator": name, "n": n, "trials": len(sel),
               "rmse": float(np.sqrt(np.mean(err ** 2))), "mean_error": float(np.mean(err))}
        if "bound" in sel[0]:
            ratio = [r["bound"] / r["error"] if r["error"] > 0 else float("inf") for r in sel]
            agg["coverage"] = float(np.mean([r["covered"] for r in sel]))
            agg["median_bound_error_ratio"] = float(np.median(ratio))
        out.append(agg)
    return out


def recompute_bound(row):
    """Bound from a report row's own diagnostics columns."""
    return float(sum(row["loss"][1:]) + sum(row["eps_stat"]))


# --- tracking -----------------------------------------------------------------

def fit_tracking_slope(ns, mean_deltas):
    """OLS of ``log Delta_{h,n}`` on ``log n`` with one intercept per level and a shared slope.

    ``mean_deltas`` has shape ``(levels, len(ns))``. Returns per-level slopes,
    the pooled slope, or ``None`` for both when any ``Delta`` is zero.
    """
    d = np.asarray(mean_deltas, dtype=float)
    if d.ndim != 2 or d.shape[1] != len(ns):
        raise ValidationError("mean_deltas must be (levels, len(ns))")
    if len(ns) < 3:
        raise ValidationError("a slope fit needs at least 3 sample sizes")
    if np.any(d <= 0):
        return None, None
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(d)
    per_level = [float(np.polyfit(x, row, 1)[0]) for row in y]
    xc = x - x.mean()
    yc = y - y.mean(axis=1, keepdims=True)
    pooled = float((yc * xc).sum() / (d.shape[0] * (xc ** 2).sum()))
    return per_level, pooled


def _tracking_task(args):
    fx, wstar, n, n_index, trial, seed, theta = args
    s = trial_seed(seed, n_index, trial)
    ds = sample_trajectories(fx.mdp, fx.behavior, n, s)
    wm, _ = run_qmmr(ds, LinearClass(fx.features, theta), fx.target, v_max=fx.mdp.v_max)
    return diag_mod.tracking_error(wm, wstar, ds)


def tracking(cfg: ExperimentConfig, bootstrap=200):
    if len(cfg.n_grid) < 3:
        raise ValidationError("tracking needs an n grid with at least 3 points")
    fx = load_fixture(cfg)
    pop = diag_mod.compute_feature_dynamics(fx.mdp, fx.target, fx.behavior, fx.features)
    wstar = diag_mod.population_weights_linear(pop)
    tasks = [(fx, wstar, n, k, t, cfg.seed, cfg.theta_radius)
             for k, n in enumerate(cfg.n_grid) for t in range(cfg.trials)]
    deltas = np.array(_map(_tracking_task, tasks, cfg.workers))
    H = fx.mdp.horizon
    deltas = deltas.reshape(len(cfg.n_grid), cfg.trials, H + 1)[:, :, 1:]   # (n, trial, level)
    mean = deltas.mean(axis=1).T                                            # (level, n)
    per_level, pooled = fit_tracking_slope(cfg.n_grid, mean)
    ci = None
    if pooled is not None:
        rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(2**31,)))
        boot = []
        for _ in range(bootstrap):
            idx = rng.integers(0, cfg.trials, size=(len(cfg.n_grid), cfg.trials))
            resampled = np.take_along_axis(deltas, idx[:, :, None], axis=1).mean(axis=1).T
            boot.append(fit_tracking_slope(cfg.n_grid, resampled)[1])
        ci = [float(np.percentile(boot, 2.5)), float(np.percentile(boot, 97.5))]
    rows = [{"n": n, "level": h + 1, "mean_delta": float(mean[h, k]),
             "sd_delta": float(deltas[k, :, h].std(ddof=1)) if cfg.trials > 1 else 0.0}
            for k, n in enumerate(cfg.n_grid) for h in range(H)]
    report = {"command": "tracking", "n_grid": cfg.n_grid, "trials": cfg.trials,
              "slope_per_level": per_level, "slope_pooled": pooled, "slope_ci95": ci,
              "zero_tracking": pooled is None, "rows": rows}
    return report, rows


# --- diagnostics ----------------------------------------------------------------

def _is_one_hot(features: FeatureMap):
    return all(np.array_equal(features.flat(h), np.eye(features.flat(h).shape[0]))
               for h in range(1, features.horizon + 1))


def diagnose(cfg: ExperimentConfig):
    fx = load_fixture(cfg)
    mdp, pi, pi_b, feats = fx.mdp, fx.target, fx.behavior, fx.features
    pop = diag_mod.compute_feature_dynamics(mdp, pi, pi_b, feats)
    wstar = diag_mod.population_weights_linear(pop)
    norms = diag_mod.coverage_norms(pop)
    n = cfg.n_grid[-1]
    ds = sample_trajectories(mdp, pi_b, n, trial_seed(cfg.seed, len(cfg.n_grid) - 1, 0))
    wm, _ = run_qmmr(ds, LinearClass(feats, cfg.theta_radius), pi, v_max=mdp.v_max, delta=cfg.delta)
    track = diag_mod.tracking_error(wm, wstar, ds)
    one_hot = _is_one_hot(feats)
    rows = []
    for h in range(1, mdp.horizon + 1):
        rho_exact = None
        if one_hot:
            try:
                rho_exact = diag_mod.rho_exact_tabular(mdp, pi, pi_b, 1, h)
            except ValidationError:
                rho_exact = None
        rows.append({
            "level": h,
            "kappa": diag_mod.leverage_constant(mdp, pi_b, feats, h),
            "coverage_psi": norms[h]["psi"],
            "coverage_dpi": norms[h]["dpi"],
            "coverage_wstar": norms[h]["wstar"],
            "rho_upper": diag_mod.rho_upper_bound(pop, 1, h),
            "rho_exact": rho_exact,
            "completeness_residual": diag_mod.check_completeness(mdp, pi, feats, h, pi_b),
            "psi_minus_dpi": float(np.linalg.norm(pop.psi[h] - pop.mean_pi[h])),
            "sigma_singular": pop.singular[h],
            "tracking_delta": float(track[h]),
            "tracking_n": n,
        })
    return {"command": "diagnose", "j_true": exact_return(mdp, pi), "levels": rows}, rows


# --- audit --------------------------------------------------------------------

def _check(name, residual, tol, passed=None, status=None, note=""):
    if status is None:
        status = "pass" if (residual <= tol if passed is None else passed) else "fail"
    return {"check": name, "status": status, "residual": float(residual), "tolerance": tol,
            "note": note}


def audit(cfg: ExperimentConfig):
    """Equivalence and identity checks on the configured fixture and its sampled datasets."""
    fx = load_fixture(cfg)
    mdp, pi, pi_b, feats = fx.mdp, fx.target, fx.behavior, fx.features
    checks = []
    datasets = [sample_trajectories(mdp, pi_b, n, trial_seed(cfg.seed, k, t))
                for k, n in enumerate(cfg.n_grid) for t in range(cfg.trials)]

    # Q-MMR linear against linear FQE; only claimed for invertible empirical covariances
    worst, applicable = 0.0, 0
    for ds in datasets:
        if any(is_singular(gram_matrix(ds, feats, h)) for h in range(1, ds.horizon + 1)):
            continue
        applicable += 1
        _, est = run_qmmr(ds, feats, pi, v_max=mdp.v_max)
        j_fqe = fqe_linear(ds, feats, pi).j_hat
        worst = max(worst, abs(est.j_hat - j_fqe) / max(1.0, abs(j_fqe)))
    checks.append(_check("fqe_equivalence", worst, 1e-8,
                         status=None if applicable else "not_applicable",
                         note=f"{applicable}/{len(datasets)} datasets with invertible covariances"))

    # tabular Q-MMR, tabular FQE and certainty equivalence
    worst, applicable = 0.0, 0
    for ds in datasets:
        emp = build_empirical_mdp(ds)
        if not emp.full_support():
            continue
        applicable += 1
        _, est = run_qmmr(ds, "tabular", pi, v_max=mdp.v_max)
        ce = emp.value(pi)
        worst = max(worst, abs(est.j_hat - ce), abs(fqe_tabular(ds, pi).j_hat - ce))
    checks.append(_check("tabular_identity", worst, 1e-10,
                         status=None if applicable else "not_applicable",
                         note=f"{applicable}/{len(datasets)} datasets with full support"))

    # level-1 fixed-design formulas
    worst = 0.0
    for ds in datasets:
        wm, _ = run_qmmr(ds, feats, pi, v_max=mdp.v_max)
        sigma = gram_matrix(ds, feats, 1)
        psi = target_moment(ds, feats, 1, np.ones(ds.n), pi)
        x = feats.at_data(ds, 1)
        worst = max(worst, float(np.max(np.abs(wm.weights[1] - x @ pinv_psd(sigma) @ psi))))
        resid = np.linalg.norm(psi - range_projector(sigma) @ psi)
        worst = max(worst, abs(wm.losses[1] - cfg.theta_radius * resid))
        if not is_singular(sigma):
            worst = max(worst, abs(wm.second_moments[1] - mahalanobis(psi, sigma)))
    checks.append(_check("first_level_fixed_design", worst, 1e-10))

    # telescoping with exact Q tables and arbitrary weights
    q = exact_q(mdp, pi)
    j = float(q[0][0, 0])
    worst = 0.0
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(2**31 + 1,)))
    for ds in datasets:
        w = rng.normal(size=(ds.horizon + 1, ds.n))
        w[0] = 1.0
        worst = max(worst, abs(telescoped_sum(ds, w, q, pi) - j))
    checks.append(_check("telescoping", worst, 1e-10))

    # population identities
    pop = diag_mod.compute_feature_dynamics(mdp, pi, pi_b, feats)
    norms = diag_mod.coverage_norms(pop)
    worst = max(abs(c["psi"] - c["wstar"]) for c in norms)
    checks.append(_check("coverage_identity", worst, 1e-10))
    complete = max(diag_mod.check_completeness(mdp, pi, feats, h) for h in range(1, mdp.horizon + 1))
    gap = max(float(np.linalg.norm(pop.psi[h] - pop.mean_pi[h])) for h in range(1, mdp.horizon + 1))
    if complete <= 1e-10:
        checks.append(_check("psi_equals_dpi", gap, 1e-10, note="complete class"))
    else:
        checks.append(_check("psi_differs_from_dpi", gap, 1e-3, passed=gap > 1e-3,
                             note="class is not complete; a gap is expected"))
    if _is_one_hot(feats):
        try:
            rho = max(diag_mod.rho_exact_tabular(mdp, pi, pi_b, t, h)
                      for h in range(1, mdp.horizon + 1) for t in range(1, h + 1))
            checks.append(_check("rho_exact_at_most_one", rho - 1.0, 1e-10))
        except ValidationError as exc:
            checks.append(_check("rho_exact_at_most_one", 0.0, 1e-10, status="not_applicable",
                                 note=str(exc)))
    passed = all(c["status"] != "fail" for c in checks)
    return {"command": "audit", "passed": passed, "checks": checks}, checks


# --- generate -----------------------------------------------------------------

def generate(cfg: ExperimentConfig, out_dir):
    if "kind" not in cfg.fixture:
        raise ValidationError("generate needs a fixture 'kind' and 'shape'")
    fx = load_fixture(cfg)
    os.makedirs(out_dir, exist_ok=True)
    dump_json(mdp_to_dict(fx.mdp), os.path.join(out_dir, "mdp.json"))
    dump_json(fx.features.to_dict(), os.path.join(out_dir, "features.json"))
    dump_json(policy_to_dict(fx.behavior), os.path.join(out_dir, "behavior.json"))
    dump_json(policy_to_dict(fx.target), os.path.join(out_dir, "target.json"))
    meta = {"kind": fx.kind, "fixture": cfg.fixture, "behavior": cfg.behavior,
            "target": cfg.target, "mdp_digest": fx.mdp.digest(),
            "behavior_digest": fx.behavior.digest(), "target_digest": fx.target.digest(),
            "j_true": exact_return(fx.mdp, fx.target)}
    dump_json(meta, os.path.join(out_dir, "fixture.json"))
    report = {"command": "generate", "files": ["mdp.json", "features.json", "behavior.json",
                                                "target.json", "fixture.json"], **meta}
    return report, []


# --- report output --------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def content_hash(report):
    body = {k: v for k, v in report.items() if k not in ("timestamp", "content_hash")}
    return hashlib.sha256(json.dumps(_jsonable(body), sort_keys=True).encode()).hexdigest()


def write_report(report, rows, out_dir, stem, config=None):
    """Write ``<stem>.json`` (with timestamp and content hash) and ``<stem>.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    report = _jsonable(dict(report))
    if config is not None:
        report["config"] = _jsonable(config)
    report["content_hash"] = content_hash(report)
    report["timestamp"] = datetime.now(timezone.utc).isoformat()
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    if rows:
        flat = [_flatten(r) for r in rows]
        cols = []
        for r in flat:
            cols += [c for c in r if c not in cols]
        with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for r in flat:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return report


def _flatten(row):
    out = {}
    for k, v in row.items():
        if isinstance(v, (list, tuple)):
            for h, x in enumerate(v):
                out[f"{k}_{h}"] = _jsonable(x)
        else:
            out[k] = _jsonable(v)
    return out
