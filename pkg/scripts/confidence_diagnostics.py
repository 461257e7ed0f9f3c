"""Where does estimator confidence come from? Trace one parametric run.

Prints, per evaluation step, the estimator AUC next to the max-probability
AUC, the mean confidence on correct vs wrong strong views, and the fraction
of labeled weak views the model already gets right (the positives-only
supervision the estimator sees once the labeled set is memorised).

    python scripts/confidence_diagnostics.py --seed 0 --set total_steps=1500
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
import torch

from conmatch_kit import augment
from conmatch_kit.cli import build_data
from conmatch_kit.config import RunConfig, fold_config, parse_value, set_key
from conmatch_kit.metrics import predict
from conmatch_kit.rng import make_rng
from conmatch_kit.trainer import Trainer


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)
    torch.set_num_threads(1)

    cfg = RunConfig()
    set_key(cfg, "mode", "conmatch_p")
    for item in args.set:
        key, _, value = item.partition("=")
        set_key(cfg, key.strip(), parse_value(value))
    cfg.validate()
    labeled, pool, test = build_data(cfg, args.seed)
    tr = Trainer(fold_config(cfg, args.seed), labeled, pool, test)

    print(f"{'step':>6} {'stage':>16} {'auc':>7} {'auc_mp':>7} {'c|right':>8} {'c|wrong':>8} {'lab_acc':>8}")
    for rec in tr.run():
        strong = augment.augment_batch(pool.inputs, tr.policies.strong, make_rng(args.seed, "eval-aug", 1))
        F, L, P = predict(tr.state.model, strong)
        tr.state.estimator.eval()
        with torch.no_grad():
            c = tr.state.estimator(F, L).numpy()
        right = P.argmax(-1).numpy() == pool.eval_labels
        weak = augment.augment_batch(labeled.inputs, tr.policies.weak, make_rng(args.seed, "diag-weak", rec["step"]))
        lab_acc = float((predict(tr.state.model, weak)[2].argmax(-1).numpy() == labeled.labels).mean())
        wrong_c = f"{c[~right].mean():8.3f}" if (~right).any() else f"{'-':>8}"
        auc = "-" if rec.get("auc") is None else f"{rec['auc']:.3f}"
        auc_mp = "-" if rec.get("auc_max_prob") is None else f"{rec['auc_max_prob']:.3f}"
        print(f"{rec['step']:>6} {rec['stage']:>16} {auc:>7} {auc_mp:>7} {c[right].mean():8.3f} {wrong_c} {lab_acc:8.3f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
