"""Run every sweep recipe (or a chosen subset) and emit curves for each run.

    python scripts/run_recipes.py                       # all recipes, full length
    python scripts/run_recipes.py table5_components --set total_steps=600 --seed-list 0
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from conmatch_kit.cli import main as cli_main

RECIPES = Path(__file__).resolve().parents[1] / "recipes"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", help="recipe stems (default: every recipe with a sweep axis)")
    p.add_argument("--out", default="runs", help="parent directory for the sweep outputs")
    p.add_argument("--seed-list", help="fold seeds, e.g. 0,1,2")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)

    names = args.names or sorted(f.stem for f in RECIPES.glob("*.cfg") if "sweep.axis" in f.read_text())
    worst = 0
    for name in names:
        out = Path(args.out) / name
        cmd = ["sweep", "--config", str(RECIPES / f"{name}.cfg"), "--out", str(out)]
        if args.seed_list:
            cmd += ["--seed-list", args.seed_list]
        for item in args.set:
            cmd += ["--set", item]
        print(f"== {name}", flush=True)
        code = cli_main(cmd)
        worst = max(worst, code)
        done = sorted(d for d in out.iterdir() if (d / "summary.json").exists()) if out.exists() else []
        if done:
            cli_main(["report", *map(str, done), "--out", str(out / "joined.csv")])
    return worst


if __name__ == "__main__":
    sys.exit(main())
