"""Scenario-table throughput of the compiled and numpy kernels.

    python3 benchmarks/bench_kernels.py [--respondents 500] [--draws 20] [--repeat 3]

Prints seconds per table and scenarios per second for each backend, rule
and condition, and checks that both backends return identical margins.
"""
import argparse
import time

import numpy as np

from conjnash.harness import CONDITIONS, ExperimentConfig, market_spec
from conjnash.kernels import available_backends
from conjnash.market import ParamSet, scenario_margins


def bench(cond, n_resp, n_draws, repeat, workers):
    cfg = ExperimentConfig(condition=cond)
    spec, _ = market_spec(cfg, seed=0)
    rng = np.random.default_rng(cond)
    pw = rng.normal(0, 2, size=(n_resp, spec.n_features * (spec.n_levels - 1), n_draws))
    for rule in ("first", "logit"):
        ps = ParamSet("draws", pw, rule)
        out = {}
        for b in available_backends():
            best = np.inf
            for _ in range(repeat):
                t = time.perf_counter()
                out[b] = scenario_margins(spec, ps, workers=workers, backend=b)
                best = min(best, time.perf_counter() - t)
            print(f"cond {cond:2d} k={spec.n_scenarios:>8d} {rule:5s} {b:6s} "
                  f"{best:8.3f} s  {spec.n_scenarios / best:12.0f} scen/s")
        if len(out) == 2:
            same = np.array_equal(out["cython"], out["python"])
            print(f"         identical margins: {same}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--respondents", type=int, default=200)
    ap.add_argument("--draws", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--conditions", type=int, nargs="*", default=[1, 3, 4])
    a = ap.parse_args()
    print("backends:", ", ".join(available_backends()))
    for c in a.conditions:
        if not 1 <= c <= len(CONDITIONS):
            raise SystemExit(f"no condition {c}")
        bench(c, a.respondents, a.draws, a.repeat, a.workers)


if __name__ == "__main__":
    main()
