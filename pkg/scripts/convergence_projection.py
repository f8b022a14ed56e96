"""Measure the per-step contraction at the prescribed step size and project
how many steps (and how much wall time) reaching eps would take.

    python scripts/convergence_projection.py --seeds 0 1 2 --seconds 5
"""

import argparse
import math
import time

import numpy as np

from expreg import theory
from expreg.datamodel import HyperParams, gen_dataset
from expreg.kernel import h_cts_closed, lambda_min
from expreg.training import train


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--m", type=int, default=4000)
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--seconds", type=float, default=5.0, help="wall budget per seed")
    args = p.parse_args()

    ds = gen_dataset(args.n, args.d, 0)
    lam = lambda_min(h_cts_closed(ds, args.sigma)).lambda_min
    print(f"lambda_min(H_cts) = {lam:.4g}")
    print("seed,B,eta,T,steps_run,mean_ratio,bound_ratio,projected_steps,projected_minutes,D_over_R")
    for seed in args.seeds:
        hp = HyperParams(n=args.n, d=args.d, m=args.m, sigma=args.sigma, eps=args.eps, lam=lam)
        start = time.perf_counter()
        tr = train(hp, ds, "paired", seed, max_seconds=args.seconds)
        per_step = (time.perf_counter() - start) / max(tr.stop_step, 1)
        ratios = np.array([r for r in tr.ratio if not math.isnan(r)])
        mean_log = float(np.mean(np.log(ratios)))
        need = math.log(hp.eps / tr.loss[0]) / mean_log
        D = theory.trace_drift_radius(tr)
        bound = 1 - tr.hp.m * tr.hp.eta * lam / 4
        print(
            f"{seed},{tr.hp.B:.4g},{tr.hp.eta:.3e},{tr.hp.T},{tr.stop_step},{math.exp(mean_log):.10f},"
            f"{bound:.10f},{need:.4g},{need * per_step / 60:.1f},{D / hp.R:.3g}"
        )


if __name__ == "__main__":
    main()
