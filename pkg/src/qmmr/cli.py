"""``qmmr generate|evaluate|tracking|audit|diagnose --config PATH``.

Exit codes: 0 on success, 2 on invalid input, 3 when an audit check fails.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import experiments as ex
from .errors import ValidationError

COMMANDS = ("generate", "evaluate", "tracking", "audit", "diagnose")


def build_parser():
    parser = argparse.ArgumentParser(prog="qmmr", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", help="output directory (default: config 'out')")
    parser.add_argument("--trials", type=int, help="override the trial count")
    parser.add_argument("--delta", type=float, help="override the bound confidence level")
    parser.add_argument("--workers", type=int, help="worker processes for trials")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
    cfg = ex.ExperimentConfig.from_dict(doc, seed=args.seed, trials=args.trials,
                                        delta=args.delta, workers=args.workers, out=args.out)
    out = cfg.out
    if args.command == "generate":
        report, rows = ex.generate(cfg, out)
    else:
        report, rows = getattr(ex, args.command)(cfg)
    config = cfg.to_dict()
    for key in ("workers", "out"):  # where and how it ran, not what ran
        config.pop(key)
    ex.write_report(report, rows, out, args.command, config)
    summary = {k: report[k] for k in ("passed", "slope_pooled", "j_true") if k in report}
    print(json.dumps({"command": args.command, "out": out, **summary}, sort_keys=True))
    if args.command == "audit" and not report["passed"]:
        for c in report["checks"]:
            if c["status"] == "fail":
                print(f"FAIL {c['check']}: residual {c['residual']:.3e} (tol {c['tolerance']:g})",
                      file=sys.stderr)
        return 3
    return 0


def main(argv=None):
    try:
        code = run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 2
    sys.exit(code)


if __name__ == "__main__":
    main()
