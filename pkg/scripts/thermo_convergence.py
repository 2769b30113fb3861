"""Grid-refinement study for the coupled heat/wave reference solver."""

import argparse
import time

import numpy as np

from conflictlab.problems import save_reference_csv, thermoelastic_reference


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--levels", type=int, default=5)
    ap.add_argument("--save", help="write the 200-point reference table to this CSV path")
    args = ap.parse_args()

    grids = [32 * 2 ** i + 1 for i in range(args.levels)]
    tabs = []
    print("grid_n,seconds,max_diff_to_next,ratio")
    for n in grids:
        t0 = time.perf_counter()
        tabs.append(thermoelastic_reference(n, nt=n))
        tabs[-1].meta["seconds"] = time.perf_counter() - t0
    diffs = [max(np.abs(b.u[::2, ::2] - a.u).max(), np.abs(b.v[::2, ::2] - a.v).max())
             for a, b in zip(tabs, tabs[1:])]
    for i, tab in enumerate(tabs[:-1]):
        ratio = diffs[i - 1] / diffs[i] if i else float("nan")
        print(f"{grids[i]},{tab.meta['seconds']:.3f},{diffs[i]:.3e},{ratio:.3f}")
    if args.save:
        save_reference_csv(thermoelastic_reference(200), args.save)


if __name__ == "__main__":
    main()
