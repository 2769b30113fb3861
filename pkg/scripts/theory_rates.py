"""Monte Carlo rate checks for E[U_K] and the beneficial range K*.

Writes one CSV table per tail to stdout.
"""

import argparse
import math

import numpy as np

from conflictlab.theorysim import TailModel, kstar_scan, loglog_slope, mc_uk, uk_curve


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=100_000)
    ap.add_argument("--d", type=int, default=3)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    tails = {"pareto": TailModel.pareto(2.0, 1.0), "exponential": TailModel.exponential()}
    Ks = [2, 4, 8, 16, 32, 64]
    print("tail,K,E_UK,SE,E_UK_times_logK")
    means = {}
    for name, tail in tails.items():
        means[name] = []
        for K in Ks:
            r = mc_uk(tail, args.d, K, args.trials, seed=K, workers=args.workers)["joint"]
            means[name].append(r.mean)
            print(f"{name},{K},{r.mean:.6g},{r.se:.2g},{r.mean * math.log(K):.6g}")
    print(f"# pareto log-log slope {loglog_slope(Ks, means['pareto']):.3f} (alpha=2 gives -0.5)")

    curve = uk_curve(tails["pareto"], args.d, 4096, trials=20_000)
    taus = np.geomspace(0.02, 0.08, 6)
    ks = kstar_scan(None, args.d, taus, curve=curve)
    print("tau,K_star")
    for t, k in zip(taus, ks):
        print(f"{t:.4g},{k}")
    good = [(t, k) for t, k in zip(taus, ks) if k]
    if len(good) > 1:
        slope = loglog_slope([1 / t for t, _ in good], [k for _, k in good])
        print(f"# log K* vs log(1/tau) slope {slope:.2f} (alpha=2)")


if __name__ == "__main__":
    main()
