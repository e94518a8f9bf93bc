"""Train every method on the desk corpus for several seeds and check the trend claims.

    python3 scripts/desk_trend.py --out runs/desk_trend.json
    python3 scripts/desk_trend.py --judge-only runs/desk_trend.json
"""
import argparse
import dataclasses

import torch

from remixsep.experiments import DeskTrendConfig, judge, load_results, run_desk_trend


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="desk_trend.json")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=DeskTrendConfig.epochs)
    p.add_argument("--num-train", type=int, default=DeskTrendConfig.num_train)
    p.add_argument("--judge-only", metavar="RESULTS")
    args = p.parse_args()
    torch.set_num_threads(1)

    if args.judge_only:
        results = load_results(args.judge_only)
    else:
        cfg = dataclasses.replace(DeskTrendConfig(), seeds=tuple(args.seeds), epochs=args.epochs, num_train=args.num_train)
        results = run_desk_trend(cfg, out_path=args.out)
    verdict = judge(results)
    for k in "abcd":
        print(f"({k}) {'PASS' if verdict.passed[k] else 'FAIL'}  {verdict.detail[k]}")


if __name__ == "__main__":
    main()
