"""Desk-scale end-to-end run: tune MLP, MoE and GG MoE on two synthetic tasks.

Each family gets a budget-20 random search in the narrowed desk space, the
best spec is refit and scored on test. Prints one line per (task, family)
plus the total wall time.

    python scripts/desk_benchmark.py [--seed 0] [--budget 20]
"""
import argparse
import time

from ggmoe.data import synth
from ggmoe.tune import DESK_MAX_EPOCHS, desk_space, tune_and_test

TASKS = {
    "linear-regression": dict(n=5000, M=8, noise=0.1),
    "gaussian-blobs": dict(n=5000, M=8, noise=1.0, separation=4.0),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--budget", type=int, default=20)
    ap.add_argument("--families", nargs="+", default=["mlp", "moe", "ggmoe"])
    args = ap.parse_args()
    t_all = time.perf_counter()
    for kind, kw in TASKS.items():
        bundle = synth(kind, seed=args.seed, **kw)
        for fam in args.families:
            t = time.perf_counter()
            res, test = tune_and_test(bundle, fam, budget=args.budget, seed=args.seed,
                                      space=desk_space(fam),
                                      train_overrides={"max_epochs": DESK_MAX_EPOCHS})
            print(f"{kind:18s} {fam:6s} val={res.best.score:.4f} test={test:.4f} "
                  f"bayes={bundle.bayes_score:.4f} {time.perf_counter() - t:.0f}s", flush=True)
    print(f"total {time.perf_counter() - t_all:.0f}s")


if __name__ == "__main__":
    main()
