"""Accuracy of several modes over a grid of synthetic difficulty settings.

For every (input_dim, class_separation) cell the script trains each mode on
the same folds and prints mean test accuracy next to the accuracy of the
nearest-true-mean classifier, which bounds what any learner can reach.

    python scripts/regime_grid.py --dims 8 16 32 --seps 3.0 3.5 4.0 --seeds 0 --csv grid.csv
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time

import numpy as np
import torch

from conmatch_kit.cli import build_data
from conmatch_kit.config import RunConfig, fold_config, set_key, parse_value
from conmatch_kit.datakit import make_synthetic, stratified_holdout, synthetic_means
from conmatch_kit.trainer import Trainer


def nearest_mean_accuracy(cfg: RunConfig) -> float:
    d = cfg.dataset
    full = make_synthetic(d.n_classes, d.n_per_class + d.n_test_per_class, d.input_dim, d.class_separation, d.noise_sigma, d.seed)
    _, test = stratified_holdout(full, d.n_test_per_class, d.seed)
    means = synthetic_means(d.n_classes, d.input_dim, d.class_separation, d.seed)
    dist = ((test.inputs[:, None, :] - means[None]) ** 2).sum(-1)
    return float((dist.argmin(1) == test.labels).mean())


def run_cell(base: RunConfig, dim: int, sep: float, modes, seeds) -> dict:
    cfg = dataclasses.replace(base, dataset=dataclasses.replace(base.dataset, input_dim=dim, class_separation=sep))
    row = {"input_dim": dim, "class_separation": sep, "nearest_mean": nearest_mean_accuracy(cfg)}
    for mode in modes:
        accs = []
        for seed in seeds:
            run = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mode=mode, eval_every=cfg.train.total_steps))
            labeled, pool, test = build_data(run, seed)
            final = list(Trainer(fold_config(run, seed), labeled, pool, test).run())[-1]
            accs.append(1.0 - final["test_error"])
        row[mode] = float(np.mean(accs))
    return row


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dims", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--seps", type=float, nargs="+", default=[3.0, 3.5, 4.0])
    p.add_argument("--modes", nargs="+", default=["baseline_fix", "conmatch_np", "conmatch_p"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--csv", help="also write the grid here")
    args = p.parse_args(argv)
    torch.set_num_threads(1)

    base = RunConfig()
    for item in args.set:
        key, _, value = item.partition("=")
        set_key(base, key.strip(), parse_value(value))
    base.validate()

    columns = ["input_dim", "class_separation", "nearest_mean", *args.modes]
    print(" ".join(f"{c:>16}" for c in columns))
    rows = []
    for dim in args.dims:
        for sep in args.seps:
            start = time.perf_counter()
            row = run_cell(base, dim, sep, args.modes, args.seeds)
            rows.append(row)
            cells = [f"{row[c]:>16.4f}" if isinstance(row[c], float) else f"{row[c]:>16}" for c in columns]
            print(" ".join(cells), f"  ({time.perf_counter() - start:.0f}s)", flush=True)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
