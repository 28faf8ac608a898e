"""Run the full experiment set and print a results table.

    python3 scripts/run_experiments.py --out runs/full            # full budgets
    python3 scripts/run_experiments.py --out runs/quick --quick   # ~10 minutes on one core

Steps: train the surrogate, solver comparison on each domain, penalty-weight
sweeps, tractability from 20 starts, gradient validation. Every step writes
its CSVs under ``--out``; ``results.json`` collects the headline numbers.
"""

import argparse
import json
import logging
from pathlib import Path

from pgaopt import harness

BUDGETS = {  # (comparison seconds, tractability seconds per start)
    "full": {"ndim": (60, 10), "dhs_simplified": (300, 60), "dhs_surrogate": (300, 60)},
    "quick": {"ndim": (10, 3), "dhs_simplified": (30, 5), "dhs_surrogate": (30, 15)},
}
SWEEPS = {"ndim": [0.0005, 0.05, 5.0], "dhs_simplified": [1.0, 100.0, 10000.0],
          "dhs_surrogate": [1.0, 100.0, 10000.0]}


def config(domain, out, model_dir, **kw):
    data = {"domain": domain, "out": str(out), **kw}
    if domain == "dhs_surrogate":
        data["surrogate"] = {"model_dir": str(model_dir)}
    return harness.config_from_dict(data)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/experiments")
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--domains", nargs="+", default=list(harness.DOMAINS))
    ap.add_argument("--n-inits", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    root = Path(args.out)
    budgets = BUDGETS["quick" if args.quick else "full"]
    model_dir = root / "surrogate"
    results = {}

    if "dhs_surrogate" in args.domains and not (model_dir / "g_net.json").is_file():
        rep = harness.train_surrogate(harness.config_from_dict({"domain": "dhs_surrogate"}), model_dir)
        results["surrogate_training"] = {k: v for k, v in rep.items() if not k.endswith("test_loss")}

    for domain in args.domains:
        run_s, tract_s = budgets[domain]
        res = results.setdefault(domain, {})
        summary = harness.run(config(domain, root / domain / "compare", model_dir, time_limit_s=run_s))
        res["compare"] = summary.rows
        rows = harness.sweep_C(config(domain, root / domain, model_dir), SWEEPS[domain],
                               root / domain / "sweep_c.csv")
        res["sweep"] = rows
        t = harness.tractability_study(config(domain, root / domain, model_dir,
                                              study={"time_limit_s": tract_s}), args.n_inits)
        res["tractability"] = {"distance": t.distance, "threshold": t.threshold, "passed": t.passed,
                               "feasible": t.feasible_count, "objectives": t.objectives}
        g = harness.validate_gradients(config(domain, root / domain, model_dir), 100)
        res["gradient_max_rel_error"] = g.max_rel_error
        (root / "results.json").write_text(json.dumps(results, indent=2, default=str))

    print(f"{'domain':<16}{'solver':<8}{'best J':>14}{'first feas s':>14}{'outer':>8}{'mean outer ms':>15}")
    for domain in args.domains:
        for r in results[domain]["compare"]:
            best = r.get("best_feasible_objective")
            first = r.get("time_to_first_feasible_s")
            mean = r.get("outer_time_mean_s")
            print(f"{domain:<16}{r['solver']:<8}{best if best is None else round(best, 4)!s:>14}"
                  f"{first if first is None else round(first, 2)!s:>14}{r.get('outer_iterations', '')!s:>8}"
                  f"{'' if mean is None else round(1e3 * mean, 2)!s:>15}")
    for domain in args.domains:
        t = results[domain]["tractability"]
        print(f"{domain}: tractability distance {t['distance']:.2e} vs threshold {t['threshold']:.2e}; "
              f"gradient error {results[domain]['gradient_max_rel_error']:.1e}")
    print(f"wrote {root / 'results.json'}")


if __name__ == "__main__":
    main()
