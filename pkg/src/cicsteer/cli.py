"""Command-line entry point: gen-data, train, validate, bench, reproduce.

Configuration is a flat key=value text file; positional key=value overrides on
the command line win. Every run prints its fully resolved configuration. The
CICSTEER_OUT environment variable overrides the output root. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, datapipe, trainer
from .netarch import COMMANDS, DEFAULT_R, N_BRANCHES
from .seeding import substream
from .simtown import (CONDITIONS, CRUISE_SPEED,
                      TRAIN_CONDITIONS, build_town, make_noise_schedule,
                      random_route, run_episode)

# data-collection turn preference; right turns are deliberately scarce so the
# right branch trains from few distinct scenarios (the co-learning test bed)
DATA_TURN_BIAS = {"left": 1.0, "right": 1.3, "straight": 0.8}

_BRANCH_LETTERS = {"l": 0, "r": 1, "s": 2, "f": 3}

CONFIG_KEYS = {
    "data_root": str, "out_dir": str, "loss": str, "weight": float,
    "head": str, "relationship": str, "decode": str, "epochs": int,
    "batch_size": int, "seed": int, "data_seed": int, "grad_clip": float,
    "augment": str,
}


class UsageError(Exception):
    pass


def parse_relationship(spec: str) -> np.ndarray:
    """'lr,sf' couples left<->right and straight<->follow; 'none' is identity."""
    r = np.eye(N_BRANCHES)
    spec = spec.strip()
    if spec in ("", "none", "identity"):
        return r
    if spec == "default":
        return DEFAULT_R.copy()
    for pair in spec.split(","):
        pair = pair.strip()
        if len(pair) != 2 or any(ch not in _BRANCH_LETTERS for ch in pair):
            raise UsageError(f"bad relationship pair {pair!r} "
                             f"(two letters from l, r, s, f)")
        i, j = _BRANCH_LETTERS[pair[0]], _BRANCH_LETTERS[pair[1]]
        r[i, j] = r[j, i] = 1.0
    return r


def load_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def resolve_config(config_path, overrides: list[str]) -> trainer.ExperimentConfig:
    raw = load_config_file(config_path) if config_path else {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = value
    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = trainer.ExperimentConfig()
    for key, value in raw.items():
        if key == "relationship":
            cfg.relationship = parse_relationship(value)
        elif key == "augment":
            cfg.augment = value.lower() in ("1", "true", "yes", "on")
        else:
            setattr(cfg, key, CONFIG_KEYS[key](value))
    out_root = os.environ.get("CICSTEER_OUT")
    if out_root:
        cfg.out_dir = str(Path(out_root) / Path(cfg.out_dir).name)
    return cfg


def print_resolved(cfg: trainer.ExperimentConfig) -> None:
    rel = "".join(str(int(v)) for v in cfg.relationship.reshape(-1))
    print(f"resolved config: data_root={cfg.data_root} out_dir={cfg.out_dir} "
          f"loss={cfg.loss} weight={cfg.weight} head={cfg.head} "
          f"relationship={rel} decode={cfg.decode} epochs={cfg.epochs} "
          f"batch_size={cfg.batch_size} seed={cfg.seed} "
          f"grad_clip={cfg.grad_clip} augment={cfg.augment}")


def generate_dataset(town_kind: str, episodes: int, duration: float,
                     condition_names, seed: int, out,
                     turn_bias: dict | None = None) -> dict:
    """Expert data collection with noise injection and three cameras."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "index.jsonl").touch()
    town = build_town(town_kind, seed)
    bias = DATA_TURN_BIAS if turn_bias is None else turn_bias
    all_rows = []
    for ep in range(episodes):
        rng = substream(seed, "data", f"ep{ep}")
        route = random_route(town, rng, duration * CRUISE_SPEED + 60.0, bias)
        noise = make_noise_schedule(substream(seed, "noise", f"ep{ep}"), duration)
        cond = CONDITIONS[condition_names[ep % len(condition_names)]]
        ep_seed = int(substream(seed, "epseed", f"ep{ep}").integers(2 ** 31))
        log = run_episode(town, route, cond, ep_seed, policy=None, noise=noise,
                          duration=duration, cameras=("front", "left", "right"),
                          record_images=True, goal_radius=0.0)
        all_rows += datapipe.persist_episode(log, out, f"ep{ep:03d}")
    counts = datapipe.command_counts(all_rows)
    return {"samples": len(all_rows), "per_command": counts}


def _cmd_gen_data(args) -> int:
    conds = tuple(args.conditions.split(","))
    for c in conds:
        if c not in CONDITIONS:
            raise UsageError(f"unknown condition {c!r}")
    summary = generate_dataset(args.town, args.episodes, args.duration,
                               conds, args.seed, args.out)
    print(f"dataset: {summary['samples']} samples at {args.out}")
    for cmd in COMMANDS:
        print(f"  {cmd}: {summary['per_command'].get(cmd, 0)}")
    return 0


def _cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.overrides)
    print_resolved(cfg)
    model, report = trainer.train(cfg)
    last = report.epochs[-1] if report.epochs else None
    if last:
        print(f"trained {len(report.epochs)} epochs; final train "
              f"loss {last['train_loss']:.6f}, val loss {last['val_loss']:.6f}, "
              f"val MAE {last['val_mae']:.4f}")
    print(f"best checkpoint: {report.best_checkpoint}")
    return 0


def _cmd_validate(args) -> int:
    cfg = resolve_config(args.config, args.overrides)
    print_resolved(cfg)
    model = trainer.load_model(cfg, args.checkpoint)
    rows = datapipe.filter_steering(datapipe.load_index(cfg.data_root))
    _, val_rows = datapipe.split(rows, seed=cfg.seed)
    cache = datapipe.SampleCache(cfg.data_root)
    metrics = trainer.validate(model, val_rows, cache, cfg)
    print(f"val loss {metrics['loss']:.6f}, MAE {metrics['mae']:.4f}")
    for cmd in COMMANDS:
        print(f"  MAE[{cmd}] = {metrics['per_command_mae'][cmd]:.4f}")
    return 0


def _benchmark_model(model, name: str, seed: int, data_seed: int):
    # Town-A with the dataset seed is the training town; Town-B is fully unseen
    towns = {kind: bench.benchmark_tasks(build_town(kind, seed=data_seed))
             for kind in ("A", "B")}
    return bench.evaluate(model.predict, towns, seed=seed, model_name=name)


def _cmd_bench(args) -> int:
    cfg = resolve_config(args.config, args.overrides)
    print_resolved(cfg)
    if args.checkpoint == "expert":
        towns = {kind: bench.benchmark_tasks(build_town(kind, seed=cfg.data_seed))
                 for kind in ("A", "B")}
        report = bench.evaluate_expert(towns)
    else:
        model = trainer.load_model(cfg, args.checkpoint)
        report = _benchmark_model(model, args.name, cfg.seed, cfg.data_seed)
    for (town, group), cell in sorted(report.cells.items()):
        print(f"  {town} town / {group} conditions: "
              f"{cell['successes']}/{cell['tasks']} = {cell['rate']:.2f}%")
    out_csv = args.csv or str(Path(cfg.out_dir) / "benchmark.csv")
    bench.write_report_csv(report, out_csv)
    print(f"report: {out_csv}")
    return 0


SUITES = {
    "table1": [("cil-regression", {"loss": "mse", "head": "none"}),
               ("cic-manual", {"loss": "mse", "head": "manual"}),
               ("cic-gtu", {"loss": "mse", "head": "gtu"})],
    "table2": [("classification", {"loss": "cce"}),
               ("hybrid-w5", {"loss": "hybrid", "weight": 5.0}),
               ("hybrid-w10", {"loss": "hybrid", "weight": 10.0}),
               ("hybrid-w15", {"loss": "hybrid", "weight": 15.0})],
    "table3": [("classification", {"loss": "cce"}),
               ("coexist-w0.4", {"loss": "coexist", "weight": 0.4}),
               ("coexist-w0.6", {"loss": "coexist", "weight": 0.6}),
               ("coexist-w0.8", {"loss": "coexist", "weight": 0.8})],
    "table4": [("sine", {"loss": "sine"})],
}


def run_suite(suite: str, seeds: list[int], base: trainer.ExperimentConfig,
              csv_path) -> list[dict]:
    """Train and benchmark every (model, seed) pair; emit rows plus medians."""
    if suite not in SUITES:
        raise UsageError(f"unknown suite {suite!r}, expected one of {sorted(SUITES)}")
    if not seeds:
        raise UsageError("reproduce needs at least one seed")
    rows = []
    for name, patch in SUITES[suite]:
        per_cell: dict[tuple, list] = {}
        for seed in seeds:
            cfg = trainer.ExperimentConfig(**{**base.__dict__})
            cfg.relationship = base.relationship.copy()
            for key, value in patch.items():
                setattr(cfg, key, value)
            cfg.seed = seed
            cfg.out_dir = str(Path(base.out_dir) / f"{name}-seed{seed}")
            try:
                model, _ = trainer.train(cfg)
                report = _benchmark_model(model, name, seed, cfg.data_seed)
            except Exception as err:  # record and continue the suite
                rows.append({"model": name, "seed": seed, "town": "-",
                             "condition_group": "-", "tasks": 0,
                             "successes": 0, "rate": "",
                             "error": str(err)})
                continue
            for (town, group), cell in sorted(report.cells.items()):
                rows.append({"model": name, "seed": seed, "town": town,
                             "condition_group": group, "tasks": cell["tasks"],
                             "successes": cell["successes"],
                             "rate": f"{cell['rate']:.2f}", "error": ""})
                per_cell.setdefault((town, group), []).append(cell["rate"])
        for (town, group), rates in sorted(per_cell.items()):
            rows.append({"model": name, "seed": "median", "town": town,
                         "condition_group": group, "tasks": "",
                         "successes": "",
                         "rate": f"{float(np.median(rates)):.2f}", "error": ""})
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    import csv as _csv
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.DictWriter(fh, fieldnames=["model", "seed", "town",
                                                 "condition_group", "tasks",
                                                 "successes", "rate", "error"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _cmd_reproduce(args) -> int:
    base = resolve_config(args.config, args.overrides)
    print_resolved(base)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    csv_path = args.csv or str(Path(base.out_dir) / f"{args.suite}.csv")
    rows = run_suite(args.suite, seeds, base, csv_path)
    for row in rows:
        if row["seed"] == "median":
            print(f"  {row['model']} [{row['town']}/{row['condition_group']}] "
                  f"median {row['rate']}%")
    print(f"comparison CSV: {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cicsteer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect expert driving data")
    p.add_argument("--town", default="A", choices=("A", "B"))
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--conditions", default=",".join(TRAIN_CONDITIONS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="dataset")
    p.set_defaults(func=_cmd_gen_data)

    for name, func in (("train", _cmd_train), ("validate", _cmd_validate),
                       ("bench", _cmd_bench)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("overrides", nargs="*", metavar="key=value")
        if name in ("validate", "bench"):
            p.add_argument("--checkpoint", required=True)
        if name == "bench":
            p.add_argument("--name", default="model")
            p.add_argument("--csv", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("reproduce", help="train + benchmark an experiment grid")
    p.add_argument("--suite", default="table1")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--config", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=_cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
