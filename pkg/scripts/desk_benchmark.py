#!/usr/bin/env python3
"""End-to-end desk benchmark through the CLI: pretrain, sample episodes, bench every variant, report.

Prints wall-clock time per stage so the run doubles as a timing check.

    python3 scripts/desk_benchmark.py --episodes 100 --runs 1 --out runs/desk
"""

import argparse
import time

from worstcase_fsl.cli import main as cli

VARIANTS = ("plain", "ac", "ac-sr", "ac-ensr")


def stage(name, argv):
    start = time.perf_counter()
    code = cli([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"{name} failed with exit code {code}")
    print(f"[{name}] {time.perf_counter() - start:.1f}s")


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--k", type=int, default=1, choices=(1, 5))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p.add_argument("--config", help="optional key = value config file applied to every stage")
    return p.parse_args()


def main():
    args = parse_args()
    common = ["--out", args.out, "--seed", args.seed, "--set", f"n_episodes={args.episodes}",
              "--set", f"n_runs={args.runs}", "--set", f"k_shot={args.k}"]
    if args.config:
        common += ["--config", args.config]
    stage("pretrain", ["pretrain", *common])
    stage("episodes", ["episodes", *common])
    for v in args.variants:
        stage(f"bench {v}", ["bench", *common, "--variant", v, "--workers", args.workers])
    stage("report", ["report", args.out, "--out", args.out])


if __name__ == "__main__":
    main()
