"""Experiment runner: train, evaluate, build datasets, plot learning curves.

Outputs per training run (one directory per seed):
  curve.csv   - progress,condition,mean_return,std_return,seed
  config.txt  - JSON snapshot of the full run configuration
  final.ckpt  - parameter checkpoint
  run.log     - per-evaluation lines plus interaction counters

An aggregate curve.svg per setting is written next to the seed directories.
All outputs are deterministic: re-running a (setting, seed) reproduces them
byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (
    SETTINGS,
    evaluate,
    rollout_episode,
    run_training,
    setting_config,
)
from .envs import CartPoleEnv
from .policy import CheckpointFormatError, load_checkpoint, save_checkpoint
from .replay import (
    Command,
    DatasetFormatError,
    ReplayMemory,
    build_il_dataset,
    build_offline_dataset,
    load_dataset,
    save_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATASET = 3
EXIT_OUTPUT = 4
EXIT_CHECKPOINT = 5
EXIT_BUDGET = 6

CSV_HEADER = "progress,condition,mean_return,std_return,seed"

PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def fail(code, message):
    print(f"gudrl: error: {message}", file=sys.stderr)
    return code


def parse_seeds(text):
    """Seed lists: '3', '0,2,5' or '0..4' (inclusive range)."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s != ""]


def fmt(x):
    return f"{x:.10g}"


def default_out(args, setting):
    if args.out:
        return Path(args.out)
    root = os.environ.get("GUDRL_OUT", "runs")
    return Path(root) / setting


def prepare_dir(path):
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise PermissionError(f"output directory {path} is not writable: {err}")


def config_overrides(args, setting):
    over = {}
    if args.env_steps is not None:
        over["total_env_steps"] = args.env_steps
    if args.train_steps is not None:
        over["total_train_steps"] = args.train_steps
    if args.eval_every is not None:
        over["eval_every"] = args.eval_every
    if args.eval_episodes is not None:
        over["eval_episodes"] = args.eval_episodes
    if args.train_interval is not None:
        over["train_interval"] = args.train_interval
    if args.batch_size is not None:
        over["batch_size"] = args.batch_size
    if args.warmup_episodes is not None:
        over["warmup_episodes"] = args.warmup_episodes
    if args.lr is not None:
        over["learning_rate"] = args.lr
    if args.k_best is not None:
        over["k_best"] = args.k_best
    if args.greedy:
        over["greedy_eval"] = True
    return setting_config(setting, **over)


def write_config(path, config, seed, extra=None):
    payload = {"seed": seed, "config": asdict(config)}
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def csv_rows_for(report, seed):
    return [
        f"{report.progress},{row.condition},{fmt(row.mean_return)},{fmt(row.std_return)},{seed}"
        for row in report.rows
    ]


# -- train ---------------------------------------------------------------------


def cmd_train(args):
    config = config_overrides(args, args.setting)
    out = default_out(args, args.setting)
    try:
        prepare_dir(out)
    except PermissionError as err:
        return fail(EXIT_OUTPUT, str(err))

    memory = None
    dataset_stats = None
    if args.setting in ("il", "offline"):
        if not args.dataset:
            return fail(EXIT_DATASET, f"--dataset is required for the {args.setting} setting")
        try:
            memory = load_dataset(args.dataset)
        except (OSError, DatasetFormatError) as err:
            return fail(EXIT_DATASET, f"cannot load dataset: {err}")
        returns = memory.returns()
        dataset_stats = {"mean": float(np.mean(returns)), "std": float(np.std(returns))}
        (out / "dataset_stats.json").write_text(json.dumps(dataset_stats, sort_keys=True) + "\n")

    seeds = parse_seeds(args.seeds)
    for seed in seeds:
        seed_dir = out / f"seed{seed}"
        prepare_dir(seed_dir)
        log_lines = []
        csv_lines = [CSV_HEADER]

        def on_eval(report):
            csv_lines.extend(csv_rows_for(report, seed))
            line = f"progress {report.progress}: mean {fmt(report.mean_return)} std {fmt(report.std_return)}"
            log_lines.append(line)
            print(f"[{args.setting} seed {seed}] {line}", flush=True)

        result = run_training(config, seed, memory=memory, on_eval=on_eval)
        (seed_dir / "curve.csv").write_text("\n".join(csv_lines) + "\n")
        write_config(seed_dir / "config.txt", config, seed, extra={"dataset": args.dataset})
        save_checkpoint(result.params, seed_dir / "final.ckpt")
        log_lines.append(f"training_env_steps={result.train_env_steps}")
        log_lines.append(f"episodes_collected={result.episodes_collected}")
        log_lines.append(f"grad_steps={result.grad_steps}")
        (seed_dir / "run.log").write_text("\n".join(log_lines) + "\n")
    emit_plot(
        [out / f"seed{seed}" / "curve.csv" for seed in seeds],
        out / "curve.svg",
        title=f"{args.setting}",
        dashed_y=dataset_stats["mean"] if dataset_stats else None,
    )
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def cmd_eval(args):
    try:
        params = load_checkpoint(args.ckpt)
    except (OSError, CheckpointFormatError) as err:
        return fail(EXIT_CHECKPOINT, f"cannot load checkpoint: {err}")
    memory = None
    if args.dataset:
        try:
            memory = load_dataset(args.dataset)
        except (OSError, DatasetFormatError) as err:
            return fail(EXIT_DATASET, f"cannot load dataset: {err}")
    over = {}
    if args.eval_episodes is not None:
        over["eval_episodes"] = args.eval_episodes
    if args.greedy:
        over["greedy_eval"] = True
    config = setting_config(args.setting, **over)
    report = evaluate(params, config, np.random.default_rng(args.seed), memory=memory)
    width = max(len(r.condition) for r in report.rows)
    print(f"{'condition':<{width}}  {'mean':>10}  {'std':>10}  episodes")
    for row in report.rows:
        print(f"{row.condition:<{width}}  {fmt(row.mean_return):>10}  {fmt(row.std_return):>10}  {row.episodes}")
    print(f"aggregate mean {fmt(report.mean_return)} std {fmt(report.std_return)}")
    out = Path(args.out) if args.out else Path(".")
    try:
        prepare_dir(out)
    except PermissionError as err:
        return fail(EXIT_OUTPUT, str(err))
    csv_lines = [CSV_HEADER] + csv_rows_for(report, args.seed)
    (out / "eval.csv").write_text("\n".join(csv_lines) + "\n")
    return EXIT_OK


# -- dataset generation -----------------------------------------------------------


def cmd_gen_dataset(args):
    out = default_out(args, "datasets")
    try:
        prepare_dir(out)
    except PermissionError as err:
        return fail(EXIT_OUTPUT, str(err))
    config = config_overrides(args, "online")
    if args.train_first:
        print("training an online agent first...", flush=True)
        result = run_training(config, args.seed)
        params = result.params
        save_checkpoint(params, out / "online.ckpt")
    elif args.ckpt:
        try:
            params = load_checkpoint(args.ckpt)
        except (OSError, CheckpointFormatError) as err:
            return fail(EXIT_CHECKPOINT, f"cannot load checkpoint: {err}")
    else:
        return fail(EXIT_USAGE, "gen-dataset needs --ckpt or --train-first")

    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 1001)))
    env = CartPoleEnv("standard", rng)

    # expert episodes: ask for the maximum and keep exact full-return runs
    expert = ReplayMemory(capacity=10 * args.il_episodes, rng=rng, setting="standard")
    attempts = 0
    found = 0
    while found < args.il_episodes and attempts < args.il_attempts:
        total, steps = rollout_episode(
            env, params, config, Command(d_h=500, d_r=500.0), rng, memory=expert
        )
        attempts += 1
        if total == 500.0:
            found += 1
    if found < args.il_episodes:
        return fail(
            EXIT_BUDGET,
            f"only {found} of {args.il_episodes} full-return episodes in {attempts} rollouts; "
            "train the online agent for longer",
        )
    il = build_il_dataset(expert, count=args.il_episodes)
    save_dataset(il, out / "il.ds")

    # return-diverse pool: commanded returns drawn low-skewed across the
    # range (square of a uniform draw), so the conditioned policy produces
    # mostly modest episodes with a thinner high tail
    pool = ReplayMemory(capacity=args.pool_episodes + 1, rng=rng, setting="standard")
    for _ in range(args.pool_episodes):
        d_r = 500.0 * float(rng.uniform(0.0, 1.0)) ** 2
        rollout_episode(
            env, params, config, Command(d_h=max(1, round(d_r)), d_r=d_r), rng, memory=pool
        )
    try:
        offline = build_offline_dataset(pool, args.offline_episodes)
    except ValueError as err:
        return fail(EXIT_BUDGET, str(err))
    save_dataset(offline, out / "offline.ds")
    returns = offline.returns()
    mean, std = float(np.mean(returns)), float(np.std(returns))
    print(f"il.ds: {len(il)} episodes, every return 500")
    print(f"offline.ds: {len(offline)} episodes, return {mean:.0f} +- {std:.0f} "
          "(reference collection: 162 +- 195)")
    return EXIT_OK


# -- plotting ----------------------------------------------------------------------


def read_curve_csv(path):
    """Parse one curve CSV into (progress, condition, mean, std, seed) rows."""
    rows = []
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise DatasetFormatError(f"{path}: line 1: expected header {CSV_HEADER!r}")
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise DatasetFormatError(f"{path}: line {i}: expected 5 fields, found {len(parts)}")
        try:
            rows.append(
                (int(parts[0]), parts[1], float(parts[2]), float(parts[3]), int(parts[4]))
            )
        except ValueError:
            raise DatasetFormatError(f"{path}: line {i}: unparseable row")
    return rows


def emit_plot(csv_paths, out_path, title="learning curve", dashed_y=None):
    """Aggregate per-seed curve CSVs into one self-contained SVG.

    One series per condition: mean across seeds with an inter-seed std band
    (band drawn only when a single condition is plotted).
    """
    rows = []
    for path in csv_paths:
        rows.extend(read_curve_csv(path))
    if not rows:
        raise DatasetFormatError("no curve rows to plot")
    conditions = sorted({r[1] for r in rows})
    series = []
    for ci, condition in enumerate(conditions):
        per_progress = {}
        for progress, cond, mean, _, seed in rows:
            if cond == condition:
                per_progress.setdefault(progress, []).append(mean)
        xs = sorted(per_progress)
        ys = [float(np.mean(per_progress[x])) for x in xs]
        band = None
        if len(conditions) == 1:
            stds = [float(np.std(per_progress[x])) for x in xs]
            if any(s > 0.0 for s in stds):  # a single seed degenerates to no band
                band = ([y - s for y, s in zip(ys, stds)], [y + s for y, s in zip(ys, stds)])
        series.append(
            {"label": condition, "xs": xs, "ys": ys, "band": band, "color": PALETTE[ci % len(PALETTE)]}
        )
    render_svg(out_path, series, title, dashed_y=dashed_y)


def render_svg(out_path, series, title, dashed_y=None, width=800, height=500):
    """Write a minimal line plot as standalone SVG markup."""
    ml, mr, mt, mb = 70, 30, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    all_x = [x for s in series for x in s["xs"]]
    all_y = [y for s in series for y in s["ys"]]
    for s in series:
        if s["band"]:
            all_y.extend(s["band"][0])
            all_y.extend(s["band"][1])
    if dashed_y is not None:
        all_y.append(dashed_y)
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y + [0.0]), max(all_y)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1
    y_hi *= 1.05

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.1f}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{ml}" y1="{mt+ph}" x2="{ml+pw}" y2="{mt+ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt+ph}" stroke="black"/>',
    ]
    for i in range(5):
        xv = x_lo + (x_hi - x_lo) * i / 4
        yv = y_lo + (y_hi - y_lo) * i / 4
        parts.append(
            f'<text x="{px(xv):.1f}" y="{mt+ph+18}" text-anchor="middle" font-size="11" '
            f'font-family="sans-serif">{xv:.6g}</text>'
        )
        parts.append(
            f'<text x="{ml-8}" y="{py(yv)+4:.1f}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{yv:.6g}</text>'
        )
        if i:
            parts.append(
                f'<line x1="{ml}" y1="{py(yv):.1f}" x2="{ml+pw}" y2="{py(yv):.1f}" '
                f'stroke="#dddddd" stroke-width="0.5"/>'
            )
    for s in series:
        if s["band"]:
            lo, hi = s["band"]
            points = [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(s["xs"], hi)]
            points += [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(reversed(s["xs"]), reversed(lo))]
            parts.append(
                f'<polygon points="{" ".join(points)}" fill="{s["color"]}" fill-opacity="0.15" '
                'stroke="none"/>'
            )
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(s["xs"], s["ys"]))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{s["color"]}" stroke-width="1.8"/>'
        )
    if dashed_y is not None:
        parts.append(
            f'<line x1="{ml}" y1="{py(dashed_y):.1f}" x2="{ml+pw}" y2="{py(dashed_y):.1f}" '
            'stroke="black" stroke-dasharray="6,4" stroke-width="1.2"/>'
        )
        parts.append(
            f'<text x="{ml+pw-4}" y="{py(dashed_y)-5:.1f}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">dataset mean {dashed_y:.6g}</text>'
        )
    # legend (skip when it would be unreadable, e.g. the 27-cell grid)
    if len(series) <= 10:
        for i, s in enumerate(series):
            y = mt + 12 + 16 * i
            parts.append(
                f'<line x1="{ml+pw-150}" y1="{y-4}" x2="{ml+pw-125}" y2="{y-4}" '
                f'stroke="{s["color"]}" stroke-width="2"/>'
            )
            parts.append(
                f'<text x="{ml+pw-118}" y="{y}" font-size="11" font-family="sans-serif">'
                f'{s["label"]}</text>'
            )
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts) + "\n")


def cmd_plot(args):
    paths = [Path(p) for p in args.curves]
    out = Path(args.out) if args.out else paths[0].parent / "curve.svg"
    dashed = args.dashed_y
    if dashed is None:
        stats = paths[0].parent.parent / "dataset_stats.json"
        if stats.exists():
            dashed = json.loads(stats.read_text())["mean"]
    try:
        emit_plot(paths, out, title=args.title, dashed_y=dashed)
    except (OSError, DatasetFormatError) as err:
        return fail(EXIT_DATASET, str(err))
    print(f"wrote {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gudrl",
        description="command-conditioned recurrent agent trained by supervised learning",
    )
    parser.add_argument("--version", action="version", version=f"gudrl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_train_flags(p):
        p.add_argument("--env-steps", type=int, default=None)
        p.add_argument("--train-steps", type=int, default=None)
        p.add_argument("--eval-every", type=int, default=None)
        p.add_argument("--eval-episodes", type=int, default=None)
        p.add_argument("--train-interval", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--warmup-episodes", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--k-best", type=int, default=None)
        p.add_argument("--greedy", action="store_true")

    t = sub.add_parser("train", help="train one setting across seeds")
    t.add_argument("--setting", required=True, choices=SETTINGS)
    t.add_argument("--seeds", default="0..4")
    t.add_argument("--dataset", default=None)
    t.add_argument("--out", default=None)
    common_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--setting", required=True, choices=SETTINGS)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", default=None)
    e.add_argument("--out", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--eval-episodes", type=int, default=None)
    e.add_argument("--greedy", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-dataset", help="build il.ds and offline.ds from an online agent")
    g.add_argument("--ckpt", default=None)
    g.add_argument("--train-first", action="store_true")
    g.add_argument("--out", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--il-episodes", type=int, default=5)
    g.add_argument("--il-attempts", type=int, default=80)
    g.add_argument("--pool-episodes", type=int, default=1200)
    g.add_argument("--offline-episodes", type=int, default=1000)
    common_train_flags(g)
    g.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("plot", help="render learning-curve SVG from curve CSVs")
    p.add_argument("curves", nargs="+")
    p.add_argument("--out", default=None)
    p.add_argument("--title", default="learning curve")
    p.add_argument("--dashed-y", type=float, default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
