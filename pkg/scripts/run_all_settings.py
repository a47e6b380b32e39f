"""Reproduce the full experiment family end to end.

Pipeline:
  1. train the online agent across seeds
  2. build il.ds / offline.ds from the best online checkpoint
  3. train il, offline, gcrl and meta across seeds
  4. leave one curve.svg per setting under the output root

Every stage goes through the CLI so each run directory is self-describing.

Usage:
    python scripts/run_all_settings.py --out runs [--seeds 0..4] [--quick]
"""

import argparse
import json
import sys
from pathlib import Path

from gudrl.cli import main as gudrl
from gudrl.cli import parse_seeds


def best_seed_checkpoint(out_root, seeds):
    """Pick the checkpoint of the seed with the highest final mean return."""
    best, best_final = None, -1.0
    for seed in seeds:
        curve = out_root / "online" / f"seed{seed}" / "curve.csv"
        last = curve.read_text().splitlines()[-1].split(",")
        final = float(last[2])
        if final > best_final:
            best_final = final
            best = out_root / "online" / f"seed{seed}" / "final.ckpt"
    print(f"best online seed: {best} (final return {best_final:.1f})")
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs")
    parser.add_argument("--seeds", default="0..4")
    parser.add_argument("--quick", action="store_true", help="tiny budgets, smoke test only")
    args = parser.parse_args()
    out = Path(args.out)
    budget = ["--env-steps", "4000", "--eval-every", "2000"] if args.quick else []
    il_budget = ["--train-steps", "200", "--eval-every", "100"] if args.quick else []

    code = gudrl(
        ["train", "--setting", "online", "--seeds", args.seeds, "--out", str(out / "online")] + budget
    )
    if code != 0:
        return code

    stages = [("gcrl", budget), ("meta", budget)]
    if args.quick:
        print("quick mode: skipping gen-dataset / il / offline (they need a converged agent)")
    else:
        ckpt = best_seed_checkpoint(out, parse_seeds(args.seeds))
        code = gudrl(["gen-dataset", "--ckpt", str(ckpt), "--out", str(out / "datasets")])
        if code != 0:
            return code
        stages = [
            ("il", ["--dataset", str(out / "datasets" / "il.ds")] + il_budget),
            ("offline", ["--dataset", str(out / "datasets" / "offline.ds")] + il_budget),
        ] + stages

    for setting, extra in stages:
        code = gudrl(
            ["train", "--setting", setting, "--seeds", args.seeds, "--out", str(out / setting)] + extra
        )
        if code != 0:
            return code
    print(json.dumps({"done": True, "out": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
