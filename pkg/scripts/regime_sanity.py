"""Adapters vs reweighting on the engineered two-loss problems.

Profiles both pairs, then trains FAMO with and without UAM adapters over a
few seeds and prints final errors as CSV.
"""

import argparse

from conflictlab.model import PINN, AdapterConfig, TrunkConfig
from conflictlab.problems import make_problem
from conflictlab.regime import profile, rank_heuristic, select
from conflictlab.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=2000)
    ap.add_argument("--hidden", type=int, default=32)
    args = ap.parse_args()

    trunk = TrunkConfig(input_dim=1, output_dim=1, hidden_dim=args.hidden)
    print("problem,f_neg,decision,method,seed,rel_l2")
    for name in ("opposing_pair", "identical_pair"):
        prob = make_problem(name)
        prof = profile(prob, trunk, T_prof=1000, seed=0)
        decision = select(prof, False, prob.K).reason
        r = max(1, rank_heuristic(args.hidden, prof.f_neg, prob.K))
        for method, adapters in (("famo", None),
                                 ("famo_uam", AdapterConfig(n_adapters=prob.K, rank=r))):
            for s in range(args.seeds):
                cfg = TrainConfig(epochs=args.epochs, balance="famo", seed=s)
                res = train(prob, PINN(trunk, adapters, seed=s), cfg)
                print(f"{name},{prof.f_neg:.3f},{decision},{method},{s},{res.rel_l2:.4e}", flush=True)


if __name__ == "__main__":
    main()
