"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import json
import time

import numpy as np
import pytest

from qmmr import (
    FeatureMap, FixtureShape, LinearClass, MinimaxConfig, build_empirical_mdp,
    compute_feature_dynamics, coverage_norms, exact_q, fqe_linear, fqe_tabular, generate_mdp,
    gram_matrix, matching_loss, rho_exact_tabular, run_qmmr, sample_trajectories, second_moment,
    softmax_policy, solve_level_linear, solve_level_minimax, target_moment, telescoped_sum,
    uniform_policy,
)
from qmmr._linalg import is_singular, pinv_psd, range_projector
from qmmr.cli import main
from qmmr.experiments import ExperimentConfig, evaluate, tracking


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def _policies(shape, seed, temperature=0.5):
    pi = softmax_policy(shape.states_per_level, shape.actions, temperature, seed + 1000)
    return pi, uniform_policy(shape.states_per_level, shape.actions)


def _fixtures():
    """Mixed fixtures within H <= 5, |S_h| <= 8, |A| <= 3, d <= 10."""
    out = []
    for seed in range(24):
        rng = np.random.default_rng(seed)
        H, A = int(rng.integers(1, 6)), int(rng.integers(2, 4))
        S = int(rng.integers(3, 9))
        d = int(rng.integers(2, min(10, S * A) + 1))
        kind = "misspecified_linear" if (seed % 3 == 2 and H >= 2) else "linear_complete"
        if kind == "misspecified_linear":
            d = min(d, S * A - 1)
        shape = FixtureShape(horizon=H, states=S, actions=A, dim=d)
        pi, pi_b = _policies(shape, seed)
        mdp, feats = generate_mdp(kind, shape, seed, pi)
        out.append((seed, mdp, feats, pi, pi_b))
    return out


def test_criterion_01_fqe_equivalence(verdict):
    start = time.perf_counter()
    worst, count = 0.0, 0
    for seed, mdp, feats, pi, pi_b in _fixtures():
        n = 50 * max(feats.dim(h) for h in range(1, mdp.horizon + 1))
        ds = sample_trajectories(mdp, pi_b, n, seed)
        while any(is_singular(gram_matrix(ds, feats, h)) for h in range(1, mdp.horizon + 1)):
            n *= 2
            ds = sample_trajectories(mdp, pi_b, n, seed)
        _, est = run_qmmr(ds, feats, pi, v_max=mdp.v_max)
        j = fqe_linear(ds, feats, pi).j_hat
        worst = max(worst, abs(est.j_hat - j) / max(1.0, abs(j)))
        count += 1
    elapsed = time.perf_counter() - start
    verdict(1, count >= 20 and worst <= 1e-8 and elapsed < 10,
            f"{count} fixtures, max relative gap {worst:.2e} (tol 1e-8), {elapsed:.2f}s (< 10s)")


def test_criterion_02_tabular_identity(verdict):
    worst_j, worst_w, count = 0.0, 0.0, 0
    for seed in range(10):
        shape = FixtureShape(horizon=3, states=3, actions=2)
        pi, pi_b = _policies(shape, seed)
        mdp, _ = generate_mdp("random_tabular", shape, seed)
        ds = sample_trajectories(mdp, pi_b, 2000, seed)
        emp = build_empirical_mdp(ds)
        assert emp.full_support()
        wm, est = run_qmmr(ds, "tabular", pi, v_max=mdp.v_max)
        ce = emp.value(pi)
        worst_j = max(worst_j, abs(est.j_hat - ce), abs(fqe_tabular(ds, pi).j_hat - ce))
        d_pi = emp.occupancy(pi)
        for h in range(1, 4):
            ratio = (d_pi[h] / emp.marginal[h])[ds.local_states(h), ds.actions[h]]
            worst_w = max(worst_w, float(np.max(np.abs(wm.weights[h] - ratio))))
        count += 1
    verdict(2, worst_j <= 1e-10 and worst_w <= 1e-12,
            f"{count} full-support fixtures, estimate gap {worst_j:.2e} (tol 1e-10), "
            f"weight gap {worst_w:.2e} (tol 1e-12)")


def test_criterion_03_single_level_fixed_design(verdict):
    w_gap = loss_inv = norm_gap = sing_gap = 0.0
    for seed in range(10):
        shape = FixtureShape(horizon=1, states=5, actions=2, dim=4)
        pi, pi_b = _policies(shape, seed)
        mdp, feats = generate_mdp("linear_complete", shape, seed, pi)
        cls = LinearClass(feats, theta_radius=1.0)
        for n in (400, 3):                          # invertible, then singular
            ds = sample_trajectories(mdp, pi_b, n, seed)
            wm, est = run_qmmr(ds, cls, pi, v_max=mdp.v_max)
            x = feats.at_data(ds, 1)
            sigma = x.T @ x / n
            xbar = feats.at_data_policy(ds, 1, pi).mean(axis=0)
            w_gap = max(w_gap, float(np.max(np.abs(wm.weights[1] - x @ pinv_psd(sigma) @ xbar))))
            if is_singular(sigma):
                resid = np.linalg.norm(xbar - range_projector(sigma) @ xbar)
                sing_gap = max(sing_gap, abs(est.losses[1] - resid))
            else:
                loss_inv = max(loss_inv, est.losses[1])
                norm = np.sqrt(xbar @ np.linalg.solve(sigma, xbar))
                norm_gap = max(norm_gap, abs(wm.second_moments[1] - norm))
    ok = w_gap <= 1e-12 and loss_inv <= 1e-10 and norm_gap <= 1e-10 and sing_gap <= 1e-10
    verdict(3, ok, f"weights {w_gap:.1e}, invertible loss {loss_inv:.1e}, "
                   f"norm identity {norm_gap:.1e}, singular residual {sing_gap:.1e} (tol 1e-10)")


def test_criterion_04_bound_validity(verdict):
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict({
        "fixture": {"kind": "linear_complete",
                    "shape": {"horizon": 3, "states": 4, "actions": 2, "dim": 3,
                              "noise": {"family": "gaussian", "scale": 0.25}}, "seed": 0},
        "behavior": {"type": "uniform"},
        "target": {"type": "softmax", "temperature": 0.5, "seed": 1},
        "estimators": ["qmmr_linear"], "n_grid": [500], "trials": 500, "delta": 0.1})
    report, _ = evaluate(cfg)
    agg = report["aggregates"][0]
    elapsed = time.perf_counter() - start
    verdict(4, agg["trials"] >= 500 and agg["coverage"] >= 0.90 and elapsed < 120,
            f"coverage {agg['coverage']:.3f} over {agg['trials']} trials (>= 0.90), "
            f"median bound/error {agg['median_bound_error_ratio']:.1f}, {elapsed:.1f}s")


def test_criterion_05_telescoping(verdict):
    worst, count = 0.0, 0
    rng = np.random.default_rng(5)
    for seed, mdp, feats, pi, pi_b in _fixtures()[:12]:
        ds = sample_trajectories(mdp, pi_b, 100, seed)
        q = exact_q(mdp, pi)
        for scale in (0.1, 1.0, 50.0):
            w = rng.normal(scale=scale, size=(mdp.horizon + 1, ds.n))
            w[0] = 1.0
            worst = max(worst, abs(telescoped_sum(ds, w, q, pi) - q[0][0, 0]))
            count += 1
    verdict(5, worst <= 1e-10, f"{count} random weight draws, max deviation {worst:.2e} (tol 1e-10)")


def test_criterion_06_minimax_solver(verdict):
    shape = FixtureShape(horizon=2, states=4, actions=2, dim=5)
    pi, pi_b = _policies(shape, 0)
    mdp, feats = generate_mdp("linear_complete", shape, 0, pi)
    ds = sample_trajectories(mdp, pi_b, 500, 0)
    cls = LinearClass(feats)
    w_prev = np.ones(ds.n)
    w_closed = solve_level_linear(ds, feats, pi, 1, w_prev)
    floor = matching_loss(ds, cls, pi, 1, w_closed, w_prev)
    C = second_moment(w_closed)
    dist, gap = {}, {}
    for T in (10**4, 4 * 10**4):
        w, _ = solve_level_minimax(ds, cls, pi, 1, w_prev, MinimaxConfig(C, T))
        dist[T] = second_moment(w - w_closed)
        gap[T] = matching_loss(ds, cls, pi, 1, w, w_prev) - floor
    ratio = gap[10**4] / gap[4 * 10**4]
    ok = dist[10**4] <= 1e-3 and 1.5 <= ratio <= 3
    verdict(6, ok, f"distance at T=1e4 {dist[10**4]:.2e} (tol 1e-3), "
                   f"gap ratio T/4T {ratio:.2f} (band [1.5, 3])")


def test_criterion_07_population_identities(verdict):
    cov, comp_gap, rho_max, miss_gap = 0.0, 0.0, 0.0, []
    for seed in range(6):
        shape = FixtureShape(horizon=3, states=4, actions=2, dim=4)
        pi, pi_b = _policies(shape, seed, temperature=0.3)
        for kind in ("random_tabular", "linear_complete", "misspecified_linear"):
            mdp, feats = generate_mdp(kind, shape, seed, pi)
            diag = compute_feature_dynamics(mdp, pi, pi_b, feats)
            cov = max(cov, max(abs(c["psi"] - c["wstar"]) for c in coverage_norms(diag)))
            gaps = [float(np.linalg.norm(diag.psi[h] - diag.mean_pi[h])) for h in range(1, 4)]
            if kind == "misspecified_linear":
                miss_gap.append(max(gaps))
            else:
                comp_gap = max(comp_gap, max(gaps))
            if kind == "random_tabular":
                rho_max = max(rho_max, max(rho_exact_tabular(mdp, pi, pi_b, t, h)
                                           for h in range(1, 4) for t in range(1, h + 1)))
    ok = cov <= 1e-10 and comp_gap <= 1e-10 and rho_max <= 1 + 1e-10 and min(miss_gap) > 1e-3
    verdict(7, ok, f"coverage identity {cov:.1e}, complete psi gap {comp_gap:.1e}, "
                   f"max exact rho {rho_max:.12f}, smallest misspecified gap {min(miss_gap):.2e}")


def test_criterion_08_tracking_rate(verdict):
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict({
        "fixture": {"kind": "linear_complete",
                    "shape": {"horizon": 3, "states": 4, "actions": 2, "dim": 3}, "seed": 0},
        "behavior": {"type": "uniform"},
        "target": {"type": "softmax", "temperature": 0.5, "seed": 1},
        "n_grid": [250, 1000, 4000, 16000], "trials": 50})
    report, _ = tracking(cfg)
    slope = report["slope_pooled"]
    elapsed = time.perf_counter() - start
    lo, hi = report["slope_ci95"]
    verdict(8, -0.65 <= slope <= -0.35 and elapsed < 300,
            f"pooled slope {slope:.3f} (band [-0.65, -0.35]), 95% CI [{lo:.3f}, {hi:.3f}], "
            f"{elapsed:.1f}s")


def test_criterion_09_empirical_zero_loss(verdict):
    shape = FixtureShape(horizon=3, states=4, actions=2, dim=4)
    pi, pi_b = _policies(shape, 9)
    mdp, feats = generate_mdp("linear_complete", shape, 9, pi)
    n = 50 * 4
    hits = 0
    for seed in range(200):
        ds = sample_trajectories(mdp, pi_b, n, seed)
        _, est = run_qmmr(ds, feats, pi, v_max=mdp.v_max)
        hits += est.losses[1:].max() <= 1e-10
    frac = hits / 200
    verdict(9, frac >= 0.95, f"{hits}/200 seeds with max loss <= 1e-10 at n = 50 d = {n} "
                             f"(fraction {frac:.3f}, need >= 0.95)")


def test_criterion_10_determinism(tmp_path, verdict):
    cfg = {
        "fixture": {"kind": "misspecified_linear",
                    "shape": {"horizon": 3, "states": 3, "actions": 2, "dim": 3}, "seed": 3},
        "behavior": {"type": "uniform"},
        "target": {"type": "softmax", "temperature": 0.5, "seed": 1},
        "estimators": ["qmmr_linear", "qmmr_tabular", "fqe_linear", "fqe_tabular", "is",
                       {"name": "qmmr_minimax", "budget": 2.0, "iterations": 300}],
        "n_grid": [100, 300, 900], "trials": 3,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    mismatched = []
    for command in ("generate", "evaluate", "tracking", "audit", "diagnose"):
        outputs = []
        for rep in ("a", "b"):
            out = tmp_path / rep / command
            with pytest.raises(SystemExit) as exc:
                main([command, "--config", str(path), "--out", str(out), "--seed", "7"])
            assert exc.value.code == 0
            files = {}
            for f in sorted(out.iterdir()):
                if f.suffix == ".json":
                    doc = json.loads(f.read_text())
                    doc.pop("timestamp", None)
                    files[f.name] = json.dumps(doc, sort_keys=True)
                else:
                    files[f.name] = f.read_bytes()
            outputs.append(files)
        if outputs[0] != outputs[1]:
            mismatched.append(command)
    verdict(10, not mismatched, "all five commands byte-identical apart from the timestamp"
            if not mismatched else f"differences in {mismatched}")
