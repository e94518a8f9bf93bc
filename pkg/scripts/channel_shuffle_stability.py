"""Validation curves of Self-Remixing with and without channel shuffle.

    python3 scripts/channel_shuffle_stability.py --n-out 2 3 --seeds 0 1 2 --epochs 15
"""
import argparse
import dataclasses
import json

import torch

from remixsep.experiments import DeskTrendConfig, RunSpec, run_desk_trend


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n-out", type=int, nargs="+", default=[2, 3])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--out", default="cs_stability.json")
    args = p.parse_args()
    torch.set_num_threads(1)

    runs = tuple(
        RunSpec(f"self_remixing_N{n}_{'cs' if cs else 'nocs'}", "self_remixing", n, channel_shuffle=cs)
        for n in args.n_out
        for cs in (True, False)
    )
    cfg = dataclasses.replace(DeskTrendConfig(), seeds=tuple(args.seeds), epochs=args.epochs, runs=runs)
    results = run_desk_trend(cfg)
    with open(args.out, "w") as fh:
        json.dump([dataclasses.asdict(r) for r in results], fh, indent=1)


if __name__ == "__main__":
    main()
