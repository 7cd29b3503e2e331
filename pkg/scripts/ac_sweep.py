#!/usr/bin/env python3
"""Sweep the number of learnable trailing groups j (and optionally alpha) on a shared episode set.

For each setting, prints ACC_m, worst-case accuracies, sigma and mu-3sigma,
so the bias/variance trade-off of partial fine-tuning can be read off one table.

    python3 scripts/ac_sweep.py --episodes 100 --alphas 0 0.1
"""

import argparse
from dataclasses import replace

from worstcase_fsl.cli import ExperimentConfig, build_store
from worstcase_fsl.data import presample_episodes
from worstcase_fsl.losses import LossConfig
from worstcase_fsl.metrics import aggregate_runs, compute_report, render_table
from worstcase_fsl.trainer import Variant, VariantSpec, pretrain, run_benchmark


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sort", choices=("acc1", "accm"), default="acc1")
    return p.parse_args()


def main():
    args = parse_args()
    cfg = ExperimentConfig(k_shot=args.k, epochs=args.epochs, master_seed=args.seed)
    store = build_store(cfg)
    backbone, _ = pretrain(store, cfg.backbone, cfg.pretrain_config, cfg.master_seed)
    episodes = presample_episodes(store, args.episodes, cfg.n_way, cfg.k_shot, cfg.n_query, args.seed)
    n_groups = len(backbone.groups)
    reports = {}
    for alpha in args.alphas:
        kind = Variant.AC_SR if alpha > 0 else Variant.AC
        for j in range(n_groups + 1):
            ft = replace(cfg.finetune_config, adaptability=j, loss=LossConfig(cfg.epsilon, alpha))
            runs = run_benchmark(backbone, store, episodes, VariantSpec(kind), ft, args.runs, args.seed)
            name = f"j={j} alpha={alpha:g}"
            reports[name] = aggregate_runs([compute_report(r.per_episode_accuracy) for r in runs])
            print(f"done {name}", flush=True)
    print(render_table(reports, sort_by=args.sort), end="")


if __name__ == "__main__":
    main()
