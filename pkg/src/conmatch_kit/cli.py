"""Command-line experiment runner: ``train``, ``sweep``, ``report``, ``gen-data``.

Run layout (``<out>`` from ``--out`` or the config's ``out`` key)::

    <out>/config.cfg            resolved configuration
    <out>/meta.json             timestamps and host info (never in the logs)
    <out>/fold<seed>/log.jsonl  one record per evaluation step
    <out>/fold<seed>/metrics.csv
    <out>/fold<seed>/checkpoints/
    <out>/summary.json, summary.txt

Exit codes: 0 success, 2 configuration or incomplete-log error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, fold_config, load_config, parse_text, parse_value, resolve_path, serialize, set_key
from .datakit import Dataset, ManifestError, SplitSpec, load_dataset, make_synthetic, save_dataset, split_labeled, stratified_holdout
from .metrics import mean_std
from .model import NonFiniteLoss
from .trainer import ConfigError, Trainer

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE = 0, 2, 3
METRIC_COLUMNS = ("step", "precision", "recall", "f1", "auc", "error_rate")
LOG_NAME = "log.jsonl"


class IncompleteRun(RuntimeError):
    pass


def _worker_cap() -> int:
    raw = os.environ.get("CONMATCH_KIT_THREADS", "")
    try:
        return max(1, int(raw)) if raw else max(1, os.cpu_count() or 1)
    except ValueError:
        raise ConfigError("CONMATCH_KIT_THREADS", f"expected an integer, got {raw!r}") from None


# --- data ---------------------------------------------------------------------


def build_data(config: RunConfig, fold_seed: int, base_dir: Path | None = None):
    """Labeled subset, unlabeled pool and test set for one fold."""
    d = config.dataset
    if d.source == "manifest":
        try:
            train = load_dataset(resolve_path(d.manifest, base_dir))
        except (OSError, ManifestError) as exc:
            raise ConfigError("dataset.manifest", str(exc)) from exc
        if d.test_manifest:
            try:
                test = load_dataset(resolve_path(d.test_manifest, base_dir))
            except (OSError, ManifestError) as exc:
                raise ConfigError("dataset.test_manifest", str(exc)) from exc
        else:
            train, test = stratified_holdout(train, d.n_test_per_class, d.seed)
    else:
        full = make_synthetic(
            d.n_classes, d.n_per_class + d.n_test_per_class, d.input_dim, d.class_separation, d.noise_sigma, d.seed
        )
        train, test = stratified_holdout(full, d.n_test_per_class, d.seed)
    labeled, pool = split_labeled(train, SplitSpec(d.labels_per_class, fold_seed, d.include_labeled_in_unlabeled))
    return labeled, pool, test


# --- single fold ----------------------------------------------------------------


def _metric_row(record: dict) -> dict:
    pseudo = record.get("pseudo") or {}
    return {
        "step": record["step"],
        "precision": pseudo.get("precision"),
        "recall": pseudo.get("recall"),
        "f1": pseudo.get("f1"),
        "auc": record.get("auc"),
        "error_rate": record["test_error"],
    }


def _write_csv(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in columns})


def run_fold(config: RunConfig, seed: int, out_dir: Path, base_dir: Path | None = None, resume: bool = False) -> dict:
    """Train one fold; with ``resume``, continue from the newest step checkpoint."""
    torch.set_num_threads(1)
    fold_dir = out_dir / f"fold{seed}"
    ckpt_dir = fold_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    labeled, pool, test = build_data(config, seed, base_dir)
    trainer = Trainer(fold_config(config, seed), labeled, pool, test)
    log_path = fold_dir / LOG_NAME
    records = []
    latest = sorted(ckpt_dir.glob("step*.manifest"))
    if resume and latest and log_path.exists():
        trainer.load_checkpoint(latest[-1].with_suffix(""))
        records = [r for r in read_log(log_path) if r["step"] <= trainer.state.step]
    with open(log_path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
        for record in trainer.run(checkpoint_dir=ckpt_dir):
            record["fold"] = seed
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            records.append(record)
    trainer.save_checkpoint(ckpt_dir / "final")
    _write_csv(fold_dir / "metrics.csv", [_metric_row(r) for r in records], METRIC_COLUMNS)
    return records[-1]


def _run_fold_job(args):
    text, seed, out_dir, base_dir, resume = args
    return run_fold(parse_text(text), seed, Path(out_dir), base_dir, resume)


# --- summaries ------------------------------------------------------------------


def summarize(finals: dict[int, dict]) -> dict:
    seeds = sorted(finals)
    errors = [finals[s]["test_error"] for s in seeds]
    err_mean, err_std = mean_std(errors)
    summary = {
        "folds": seeds,
        "error_rate": {"mean": err_mean, "std": err_std, "per_fold": errors},
        "accuracy": {"mean": 1.0 - err_mean, "std": err_std},
    }
    for key in ("auc", "auc_max_prob"):
        vals = [finals[s].get(key) for s in seeds]
        if all(v is not None for v in vals):
            m, sd = mean_std(vals)
            summary[key] = {"mean": m, "std": sd, "per_fold": vals}
    n_classes = len(finals[seeds[0]]["per_class_acc"])
    summary["per_class_acc"] = [mean_std([finals[s]["per_class_acc"][y] for s in seeds])[0] for y in range(n_classes)]
    return summary


def summary_text(summary: dict) -> str:
    e = summary["error_rate"]
    lines = [
        f"folds: {', '.join(str(s) for s in summary['folds'])}",
        f"error rate: {100 * e['mean']:.2f} +- {100 * e['std']:.2f} %",
    ]
    for key in ("auc", "auc_max_prob"):
        if key in summary:
            lines.append(f"{key}: {summary[key]['mean']:.4f} +- {summary[key]['std']:.4f}")
    lines.append("per-class accuracy: " + " ".join(f"{a:.3f}" for a in summary["per_class_acc"]))
    return "\n".join(lines) + "\n"


def _write_meta(out_dir: Path, extra: dict) -> None:
    meta = {
        "started": extra.pop("started"),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "host": platform.node(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "version": __version__,
        **extra,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def train_run(
    config: RunConfig, out_dir: Path, parallel: bool = False, base_dir: Path | None = None, resume: bool = False
) -> dict:
    """All folds of one configuration; returns the summary."""
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(serialize(config))
    seeds = list(config.seeds)
    workers = min(_worker_cap(), len(seeds)) if parallel else 1
    if workers > 1:
        text = serialize(config)
        jobs = [(text, s, str(out_dir), base_dir, resume) for s in seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            finals = dict(zip(seeds, pool.map(_run_fold_job, jobs)))
    else:
        finals = {s: run_fold(config, s, out_dir, base_dir, resume) for s in seeds}
    summary = summarize(finals)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.txt").write_text(summary_text(summary))
    _write_meta(out_dir, {"started": started, "workers": workers})
    return summary


# --- reporting ------------------------------------------------------------------


def read_log(path: Path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise IncompleteRun(f"{path}:{lineno}: truncated record") from exc
    return records


CURVE_COLUMNS = (
    "fold", "step", "stage", "lr", "loss_total", "loss_sup", "loss_un", "loss_ccr", "loss_conf", "loss_conf_sup",
    "accuracy", "test_error", "precision", "recall", "f1", "auc", "auc_max_prob",
)


def curve_rows(run_dir: Path) -> list[dict]:
    """One row per (fold, eval step); raises IncompleteRun if any fold is unfinished."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.cfg"
    logs = sorted(run_dir.glob(f"fold*/{LOG_NAME}"))
    if not cfg_path.exists() or not logs:
        raise IncompleteRun(f"{run_dir}: no completed run found")
    config = load_config(cfg_path, validate=False)
    rows = []
    for log in logs:
        records = read_log(log)
        if not records or records[-1]["step"] != config.train.total_steps:
            raise IncompleteRun(f"{log}: run stopped before step {config.train.total_steps}")
        for r in records:
            if r.get("schema_version") != 1:
                raise IncompleteRun(f"{log}: unsupported schema_version {r.get('schema_version')!r}")
            row = {k: r.get(k) for k in ("fold", "step", "stage", "lr", "test_error", "auc", "auc_max_prob")}
            row["accuracy"] = 1.0 - r["test_error"]
            row.update({f"loss_{k}": v for k, v in r["loss"].items()})
            row.update({k: v for k, v in (r.get("pseudo") or {}).items() if k in ("precision", "recall", "f1")})
            rows.append(row)
    return rows


def joined_rows(named: dict[str, list[dict]]) -> tuple[list[dict], list[str]]:
    """Fold-averaged curves of several runs side by side, keyed by step."""
    fields = ("accuracy", "loss_total", "precision", "recall", "f1", "auc")
    table: dict[int, dict] = {}
    for name, rows in named.items():
        by_step: dict[int, list[dict]] = {}
        for r in rows:
            by_step.setdefault(r["step"], []).append(r)
        for step, group in by_step.items():
            entry = table.setdefault(step, {"step": step})
            for f in fields:
                vals = [g[f] for g in group if g.get(f) is not None]
                entry[f"{name}:{f}"] = sum(vals) / len(vals) if vals else None
    columns = ["step"] + [f"{n}:{f}" for n in named for f in fields]
    return [table[s] for s in sorted(table)], columns


def report(run_dirs: list[Path], out: Path | None = None) -> str:
    names = [Path(d).name for d in run_dirs]
    if len(set(names)) != len(names):
        names = [str(d) for d in run_dirs]
    named = {}
    for name, d in zip(names, run_dirs):
        rows = curve_rows(d)
        _write_csv(Path(d) / "curves.csv", rows, CURVE_COLUMNS)
        named[name] = rows
    texts = []
    for d in run_dirs:
        summary_path = Path(d) / "summary.txt"
        body = summary_path.read_text() if summary_path.exists() else ""
        texts.append(f"[{Path(d).name}]\n{body}")
    if len(run_dirs) > 1:
        rows, columns = joined_rows(named)
        target = out or Path(run_dirs[0]).parent / "joined.csv"
        _write_csv(Path(target), rows, columns)
    return "\n".join(texts)


# --- sweeps ---------------------------------------------------------------------


def _value_label(value) -> str:
    return str(value) if not isinstance(value, (list, dict)) else json.dumps(value, separators=(",", ":"))


def _sweep_point(axis: str, value) -> tuple[str, dict]:
    """Label and key assignments for one sweep value.

    A plain value sets ``axis``. A JSON object sets several keys at once and
    must include ``axis``; an optional ``label`` entry names the run directory.
    """
    if not isinstance(value, dict):
        return _value_label(value), {axis: value}
    assignments = {k: v for k, v in value.items() if k != "label"}
    if axis not in assignments:
        raise ConfigError(axis, f"sweep value {_value_label(value)} does not set the axis key")
    label = value.get("label")
    if label is None:
        extras = ",".join(f"{k}={_value_label(v)}" for k, v in assignments.items() if k != axis)
        label = _value_label(assignments[axis]) + (f"+{extras}" if extras else "")
    return str(label), assignments


def sweep(config: RunConfig, axis: str, values: list, out_dir: Path, parallel: bool = False, base_dir: Path | None = None) -> list[dict]:
    """One run per axis value over shared seeds; failures are recorded and the sweep carries on."""
    # reject a bad axis or companion key before any run starts
    points = [_sweep_point(axis, v) for v in values]
    probe = parse_text(serialize(config))
    for _, assignments in points:
        for key, value in assignments.items():
            set_key(probe, key, value)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, assignments in points:
        run_dir = out_dir / f"{axis}={label}"
        row = {"axis": axis, "value": label, "status": "ok"}
        try:
            cfg = parse_text(serialize(config))
            for key, value in assignments.items():
                set_key(cfg, key, value)
            cfg.validate(base_dir)
            summary = train_run(cfg, run_dir, parallel, base_dir)
            row.update(
                error_mean=summary["error_rate"]["mean"],
                error_std=summary["error_rate"]["std"],
                accuracy_mean=summary["accuracy"]["mean"],
                auc_mean=(summary.get("auc") or {}).get("mean"),
                auc_max_prob_mean=(summary.get("auc_max_prob") or {}).get("mean"),
            )
        except ConfigError as exc:
            row["status"] = f"config error: {exc}"
        except NonFiniteLoss as exc:
            row["status"] = f"non-finite loss: {exc}"
        rows.append(row)
    columns = ("axis", "value", "status", "error_mean", "error_std", "accuracy_mean", "auc_mean", "auc_max_prob_mean")
    _write_csv(out_dir / "comparison.csv", rows, columns)
    (out_dir / "comparison.txt").write_text(comparison_text(rows))
    return rows


def comparison_text(rows: list[dict]) -> str:
    lines = [f"{'value':<24} {'error %':>16} {'auc':>8}  status"]
    for r in rows:
        if "error_mean" in r:
            err = f"{100 * r['error_mean']:.2f} +- {100 * r['error_std']:.2f}"
            auc = "" if r.get("auc_mean") is None else f"{r['auc_mean']:.4f}"
        else:
            err, auc = "-", "-"
        lines.append(f"{r['value']:<24} {err:>16} {auc:>8}  {r['status']}")
    return "\n".join(lines) + "\n"


# --- entry point ----------------------------------------------------------------


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError("seeds", f"--seed-list must be integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds", "--seed-list is empty")
    return seeds


def _load(args) -> tuple[RunConfig, Path]:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    config = load_config(path, validate=False)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "--set expects key=value")
        set_key(config, key.strip(), parse_value(value))
    if getattr(args, "seed_list", None):
        config.seeds = _seed_list(args.seed_list)
    if getattr(args, "out", None):
        config.out = args.out
    config.validate(path.parent)
    return config, path.parent


def _parse_values(text: str) -> list:
    text = text.strip()
    if text.startswith("["):
        values = parse_value(text)
        if isinstance(values, list):
            return values
    return [parse_value(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conmatch-kit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_help="output directory (overrides the config's out key)"):
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed-list", help="fold seeds, e.g. 0,1,2")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="train every fold of one configuration")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue folds from their newest checkpoint")
    p.add_argument("--parallel", action="store_true", help="run folds in separate processes")

    p = sub.add_parser("sweep", help="one run per value of a config key")
    common(p)
    p.add_argument("--axis", help="dotted config key to vary (default: the config's sweep.axis)")
    p.add_argument("--values", help="comma-separated or JSON list of values (default: sweep.values)")
    p.add_argument("--parallel", action="store_true", help="run folds in separate processes")

    p = sub.add_parser("report", help="curves and summary for finished runs")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="joined CSV path when comparing runs")

    p = sub.add_parser("gen-data", help="write a synthetic dataset in manifest format")
    p.add_argument("--config", help="take dataset.* keys from this config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        if args.verb == "train":
            config, base = _load(args)
            summary = train_run(config, Path(config.out), args.parallel, base, args.resume)
            sys.stdout.write(summary_text(summary))
        elif args.verb == "sweep":
            config, base = _load(args)
            axis = args.axis or config.sweep.axis
            values = _parse_values(args.values) if args.values else list(config.sweep.values)
            if not axis:
                raise ConfigError("sweep.axis", "no axis given (use --axis or set sweep.axis)")
            if not values:
                raise ConfigError("sweep.values", "no values given (use --values or set sweep.values)")
            rows = sweep(config, axis, values, Path(config.out), args.parallel, base)
            sys.stdout.write(comparison_text(rows))
            if any(r["status"] != "ok" for r in rows):
                failed = [r for r in rows if r["status"] != "ok"]
                return EXIT_NONFINITE if all("non-finite" in r["status"] for r in failed) else EXIT_CONFIG
        elif args.verb == "report":
            sys.stdout.write(report(args.run_dirs, args.out))
        elif args.verb == "gen-data":
            config = RunConfig()
            if args.config:
                config = load_config(args.config, validate=False)
            for item in args.set or []:
                key, _, value = item.partition("=")
                set_key(config, key.strip(), parse_value(value))
            config.dataset.source = "synthetic"
            config.validate()
            d = config.dataset
            full = make_synthetic(d.n_classes, d.n_per_class + d.n_test_per_class, d.input_dim, d.class_separation, d.noise_sigma, d.seed)
            train, test = stratified_holdout(full, d.n_test_per_class, d.seed)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            for part in (train, test):
                split = "train" if part is train else "test"
                save_dataset(Dataset(part.inputs, part.labels, part.n_classes, f"{d.source}-{split}"), out / split)
            print(f"wrote {out / 'train.manifest'} and {out / 'test.manifest'}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompleteRun as exc:
        print(f"incomplete run: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
