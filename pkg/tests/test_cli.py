import csv
import json

import numpy as np
import pytest

from qmmr import check_completeness, generate_mdp
from qmmr.cli import main
from qmmr.experiments import ExperimentConfig, fit_tracking_slope, load_fixture, recompute_bound
from qmmr.errors import ValidationError

BASE = {
    "fixture": {"kind": "linear_complete",
                "shape": {"horizon": 2, "states": 3, "actions": 2, "dim": 3}, "seed": 0},
    "behavior": {"type": "uniform"},
    "target": {"type": "epsilon_mix", "base": {"type": "softmax", "temperature": 0.3, "seed": 4},
               "epsilon": 0.2},
    "estimators": ["qmmr_linear", "qmmr_tabular", "fqe_linear", "fqe_tabular", "is",
                   {"name": "qmmr_minimax", "budget": 2.0, "iterations": 200}],
    "n_grid": [200, 400, 800],
    "trials": 2,
}


def _run(tmp_path, command, cfg=None, *extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg or BASE))
    with pytest.raises(SystemExit) as exc:
        main([command, "--config", str(path), *extra])
    return exc.value.code


def _strip(path):
    doc = json.loads(path.read_text())
    doc.pop("timestamp")
    return doc


def test_generate_is_deterministic_and_creates_dirs(tmp_path):
    out1, out2 = tmp_path / "a" / "nested", tmp_path / "b"
    assert _run(tmp_path, "generate", None, "--out", str(out1)) == 0
    assert _run(tmp_path, "generate", None, "--out", str(out2)) == 0
    for name in ("mdp.json", "features.json", "behavior.json", "target.json", "fixture.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_generated_fixture_round_trips_and_is_complete(tmp_path):
    out = tmp_path / "fx"
    _run(tmp_path, "generate", None, "--out", str(out))
    fx = load_fixture(ExperimentConfig.from_dict({**BASE, "fixture": {"dir": str(out)}}))
    assert max(check_completeness(fx.mdp, fx.target, fx.features, h) for h in (1, 2)) <= 1e-10
    inline = load_fixture(ExperimentConfig.from_dict(BASE))
    assert inline.mdp.digest() == fx.mdp.digest()


@pytest.mark.parametrize("command", ["evaluate", "tracking", "audit", "diagnose"])
def test_commands_are_byte_deterministic(tmp_path, command):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(tmp_path, command, None, "--out", str(a)) == 0
    assert _run(tmp_path, command, None, "--out", str(b), "--workers", "2") == 0
    assert _strip(a / f"{command}.json") == _strip(b / f"{command}.json")
    assert (a / f"{command}.csv").read_bytes() == (b / f"{command}.csv").read_bytes()


def test_evaluate_rows_are_self_consistent(tmp_path):
    _run(tmp_path, "evaluate", None, "--out", str(tmp_path / "o"))
    report = json.loads((tmp_path / "o" / "evaluate.json").read_text())
    rows = report["rows"]
    assert len(rows) == 6 * 3 * 2
    for row in rows:
        assert row["error"] == pytest.approx(abs(row["j_hat"] - row["j_true"]), abs=1e-15)
        if "bound" in row:
            assert row["bound"] == pytest.approx(recompute_bound(row), abs=1e-12)
    for agg in report["aggregates"]:
        if "coverage" in agg:
            assert 0.0 <= agg["coverage"] <= 1.0
    with open(tmp_path / "o" / "evaluate.csv") as fh:
        assert len(list(csv.DictReader(fh))) == len(rows)


def test_evaluate_on_policy_deterministic_tabular_has_zero_error(tmp_path):
    cfg = {"fixture": {"kind": "random_tabular",
                       "shape": {"horizon": 2, "states": 1, "actions": 1,
                                 "noise": {"family": "none", "scale": 0.0}}, "seed": 0},
           "behavior": {"type": "uniform"}, "target": {"type": "uniform"},
           "estimators": ["qmmr_tabular"], "n_grid": [5], "trials": 1}
    assert _run(tmp_path, "evaluate", cfg, "--out", str(tmp_path / "o")) == 0
    report = json.loads((tmp_path / "o" / "evaluate.json").read_text())
    assert report["rows"][0]["error"] == pytest.approx(0.0, abs=1e-12)
    assert report["aggregates"][0]["coverage"] == 1.0


def test_audit_reports_singular_and_misspecified_cases(tmp_path):
    cfg = dict(BASE, n_grid=[3], trials=2,
               fixture={"kind": "misspecified_linear",
                        "shape": {"horizon": 3, "states": 3, "actions": 2, "dim": 4}, "seed": 1})
    assert _run(tmp_path, "audit", cfg, "--out", str(tmp_path / "o")) == 0
    checks = {c["check"]: c for c in json.loads((tmp_path / "o" / "audit.json").read_text())["checks"]}
    assert checks["fqe_equivalence"]["status"] == "not_applicable"
    assert checks["psi_differs_from_dpi"]["status"] == "pass"


def test_validation_errors_exit_with_two(tmp_path):
    assert _run(tmp_path, "evaluate", None, "--delta", "1.5") == 2
    assert _run(tmp_path, "tracking", dict(BASE, n_grid=[100, 200])) == 2
    assert _run(tmp_path, "evaluate", dict(BASE, n_grid=[400, 200])) == 2
    assert _run(tmp_path, "evaluate", dict(BASE, estimators=["mystery"])) == 2
    bad = dict(BASE, fixture={"kind": "linear_complete",
                              "shape": {"horizon": 2, "states": 1, "actions": 2, "dim": 5}})
    assert _run(tmp_path, "generate", bad) == 2
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(SystemExit) as exc:
        main(["audit", "--config", str(tmp_path / "broken.json")])
    assert exc.value.code == 2


def test_audit_failure_exits_with_three(tmp_path, monkeypatch):
    import qmmr.experiments as ex

    real = ex.audit

    def broken(cfg):
        report, checks = real(cfg)
        checks[0]["status"] = "fail"
        report["passed"] = False
        return report, checks

    monkeypatch.setattr(ex, "audit", broken)
    assert _run(tmp_path, "audit", None, "--out", str(tmp_path / "o")) == 3


def test_slope_fit():
    ns = [250, 1000, 4000, 16000]
    deltas = np.array([[2.0 / np.sqrt(n) for n in ns], [0.5 / np.sqrt(n) for n in ns]])
    per_level, pooled = fit_tracking_slope(ns, deltas)
    np.testing.assert_allclose(per_level, -0.5, atol=1e-12)
    assert pooled == pytest.approx(-0.5, abs=1e-12)
    assert fit_tracking_slope(ns, np.zeros((2, 4))) == (None, None)
    with pytest.raises(ValidationError):
        fit_tracking_slope(ns[:2], deltas[:, :2])


def test_more_trials_tighten_the_slope_interval(tmp_path):
    from qmmr.experiments import tracking

    widths = []
    for trials in (10, 40):
        cfg = ExperimentConfig.from_dict(dict(BASE, trials=trials, n_grid=[200, 800, 3200]))
        report, _ = tracking(cfg)
        lo, hi = report["slope_ci95"]
        widths.append(hi - lo)
    assert widths[1] < widths[0]
