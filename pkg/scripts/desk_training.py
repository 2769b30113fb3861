"""Train every registered problem with a handful of methods and print final errors."""

import argparse

from conflictlab.cli import METHODS
from conflictlab.model import PINN, AdapterConfig, TrunkConfig
from conflictlab.problems import REGISTRY, make_problem
from conflictlab.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--problems", default="poisson1d,heat1d,burgers1d,helmholtz2d,inverse_poisson")
    ap.add_argument("--methods", default="vanilla,famo,gradnorm,pcgrad_grouped,famo_uam")
    ap.add_argument("--epochs", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("problem,method,rel_l2,physical,failed,seconds")
    for name in args.problems.split(","):
        if name not in REGISTRY:
            raise SystemExit(f"unknown problem {name}")
        prob = make_problem(name)
        for method in args.methods.split(","):
            balance, adapters_on, mixing = METHODS[method]
            trunk = TrunkConfig(input_dim=prob.input_dim, output_dim=prob.output_dim)
            adapters = AdapterConfig(n_adapters=prob.K, rank=8, mixing=mixing) if adapters_on else None
            physical = {prob.physical.name: prob.physical.init} if prob.physical else None
            model = PINN(trunk, adapters, seed=args.seed, physical=physical)
            res = train(prob, model, TrainConfig(epochs=args.epochs, balance=balance, seed=args.seed))
            phys = ";".join(f"{k}={v:.4f}" for k, v in res.physical.items())
            print(f"{name},{method},{res.rel_l2:.4e},{phys},{res.failed},{res.wall_time:.1f}", flush=True)


if __name__ == "__main__":
    main()
