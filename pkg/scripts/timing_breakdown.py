"""Per-outer-iteration cost of PGA and IPDD split into inner iterations and time per inner iteration.

    python3 scripts/timing_breakdown.py --domain ndim --seconds 20
"""

import argparse

import numpy as np

from pgaopt import harness


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--domain", default="ndim", choices=harness.DOMAINS)
    ap.add_argument("--seconds", type=float, default=20.0)
    ap.add_argument("--model-dir", help="trained networks (dhs_surrogate only)")
    args = ap.parse_args()
    data = {"domain": args.domain}
    if args.model_dir:
        data["surrogate"] = {"model_dir": args.model_dir}
    cfg = harness.config_from_dict(data)
    problem = harness.build_problem(cfg)
    u0 = harness.initial_points(cfg, problem, 1)[0]
    for solver in ("pga", "ipdd"):
        _, _, trace = harness._solve(cfg, problem, solver, u0, args.seconds)
        ends = trace.outer_end_records()
        inner = np.diff([0] + [r.inner_iters_cum for r in ends])[: len(trace.outer_durations)]
        dur = np.array(trace.outer_durations)
        per_iter = dur.sum() / max(inner.sum(), 1)
        print(f"{solver:>5}: {len(dur)} outer iterations, mean {1e3 * dur.mean():.2f} ms, "
              f"mean inner iterations {inner.mean():.1f}, {1e6 * per_iter:.1f} us per inner iteration")


if __name__ == "__main__":
    main()
