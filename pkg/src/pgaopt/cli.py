"""Command-line entry point (``pgaopt <command> --config file.yaml``).

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .errors import (ConfigError, ContractViolation, DataFormatError, InfeasibleSampler,
                     NumericalFailure)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment config (all keys optional)")
    p.add_argument("--domain", choices=harness.DOMAINS, help="override the problem domain")
    p.add_argument("--solver", help="override solvers, comma separated subset of pm,pga,ipdd")
    p.add_argument("--time-limit", type=float, help="override the per-solver wall-clock budget (s)")
    p.add_argument("--seed", type=int, help="override the random seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pgaopt", description="Guardrail penalty solvers and experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("run", help="compare solvers from one start; writes traces and summary.csv")
    _common(p)
    p = sub.add_parser("tractability", help="PGA from many starts; spread of solutions vs threshold")
    _common(p)
    p.add_argument("--n-inits", type=int, help="number of starting points (default 20)")
    p = sub.add_parser("sweep-c", help="one penalty solve per C; writes sweep_c.csv")
    _common(p)
    p.add_argument("--C", dest="C_values", type=float, nargs="+", help="penalty weights (at least two)")
    p = sub.add_parser("train-surrogate", help="train the state and output networks")
    _common(p)
    p = sub.add_parser("gen-data", help="simulate episodes and write dataset.csv")
    _common(p)
    p = sub.add_parser("validate-gradients", help="analytic vs central-difference gradients")
    _common(p)
    p.add_argument("--points", type=int, help="number of random feasible points (default 100)")
    return parser


def _config(args) -> harness.ExperimentConfig:
    solvers = None
    if args.solver:
        solvers = [s.strip() for s in args.solver.split(",") if s.strip()]
    return harness.load_config(args.config, domain=args.domain, solvers=solvers, time_limit_s=args.time_limit,
                               seed=args.seed, out=args.out)


def _dispatch(args) -> int:
    cfg = _config(args)
    if args.command == "run":
        s = harness.run(cfg)
        for r in s.rows:
            print(f"{r['solver']:>6}  best={r.get('best_feasible_objective')}  "
                  f"outer={r.get('outer_iterations')}  mean_outer_s={r.get('outer_time_mean_s')}  {r.get('error', '')}")
        print(f"wrote {s.out_dir / 'summary.csv'}")
        if any(r.get("status") == "numerical_failure" for r in s.rows):
            return EXIT_NUMERICAL
    elif args.command == "tractability":
        t = harness.tractability_study(cfg, args.n_inits)
        verdict = "below" if t.passed else "NOT below"
        print(f"normalized max distance {t.distance:.3e} {verdict} threshold {t.threshold:.3e} "
              f"({t.feasible_count}/{len(t.solutions)} feasible)")
    elif args.command == "sweep-c":
        from pathlib import Path
        path = Path(cfg.out) / "sweep_c.csv"
        rows = harness.sweep_C(cfg, args.C_values, path)
        for r in rows:
            print(f"C={r['C']:<10g} J={r['objective']:.6g}  signed_worst={r['signed_worst']:.6g}")
        print(f"wrote {path}")
    elif args.command == "train-surrogate":
        rep = harness.train_surrogate(cfg)
        print(json.dumps({k: v for k, v in rep.items() if not k.endswith("test_loss")}, indent=2))
    elif args.command == "gen-data":
        print(f"wrote {harness.gen_data(cfg)}")
    elif args.command == "validate-gradients":
        rep = harness.validate_gradients(cfg, args.points)
        print(f"{cfg.domain}: max relative FD error {rep.max_rel_error:.3e} over {rep.n_points} points "
              f"(tolerance {rep.tolerance:g}) -> {'pass' if rep.passed else 'FAIL'}")
        if not rep.passed:
            return EXIT_NUMERICAL
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ContractViolation, DataFormatError, InfeasibleSampler, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
