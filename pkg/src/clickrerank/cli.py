"""Command-line entry point: simulate logs, train batch models, replay policies.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then command-line flags. Every command works inside one output
directory::

    world.json                     world parameters actually used
    exploration.jsonl              shuffled exploration log
    exploration.truth.jsonl        same sessions plus true CTR@1 (optional)
    control.jsonl                  baseline-order log (optional)
    models/model_*.json            batch models
    reports/                       replay outputs

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 contract violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .exceptions import ConfigurationError, ContractViolation
from .experiment import MODEL_FILES, RECIPES, recipes_for, train_model
from .model import HyperParams, ModelState
from .policy import POLICY_NAMES, REQUIRED_MODEL, make_policy
from .replay import (SIX_HOURS, format_table, replay, write_click_metrics_csv, write_reports_csv,
                     write_segments_csv, write_series_csv)
from .simlog import (WorldSpec, drift_world_spec, generate_control_log, generate_exploration_log,
                     generate_world, read_log, split_log, write_log)

log = logging.getLogger("clickrerank")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CONTRACT = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "world_preset": "drift",
    "world": {},
    "drift": {},
    "hyper": {},
    "policies": list(POLICY_NAMES),
    "split_ts": None,
    "reveal_interval": 300,
    "epsilon": 0.0,
    "mode": "rank_one",
    "control_log": True,
    "truth": False,
    "bucket_seconds": SIX_HOURS,
}

HYPER_KEYS = ("lambda1", "lambda2", "lambda3", "b0", "hash_buckets")


# -- configuration -----------------------------------------------------------

def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc


def load_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        user = _read_json(args.config)
        if not isinstance(user, dict):
            raise ConfigurationError("config file must hold a JSON object")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(user)
    for key in ("seed", "out", "split_ts", "reveal_interval", "epsilon"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "policies", None):
        cfg["policies"] = args.policies
    if cfg["policies"] == "all" or cfg["policies"] == ["all"]:
        cfg["policies"] = list(POLICY_NAMES)
    for name in cfg["policies"]:
        if name not in POLICY_NAMES:
            raise ConfigurationError(f"unknown policy {name!r}; known: {', '.join(POLICY_NAMES)}")
    if cfg["world_preset"] not in ("drift", "plain"):
        raise ConfigurationError("world_preset must be 'drift' or 'plain'")
    if cfg["reveal_interval"] < 0:
        raise ConfigurationError("reveal_interval must be non-negative")
    if not 0.0 <= cfg["epsilon"] <= 1.0:
        raise ConfigurationError("epsilon must lie in [0, 1]")
    return cfg


def build_world_spec(cfg: dict) -> WorldSpec:
    world = cfg["world"]
    if isinstance(world, str):
        world = _read_json(world)
    try:
        if cfg["world_preset"] == "drift":
            return drift_world_spec(cfg["seed"], **cfg["drift"], **world)
        return WorldSpec(**{**world, "rng_seed": cfg["seed"]})
    except (TypeError, ContractViolation) as exc:
        raise ConfigurationError(f"bad world parameters: {exc}") from exc


def build_hyper(cfg: dict, spec: WorldSpec) -> HyperParams:
    unknown = set(cfg["hyper"]) - set(HYPER_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown hyper-parameters: {', '.join(sorted(unknown))}")
    try:
        return HyperParams(d=spec.d, s=spec.s, **cfg["hyper"])
    except ContractViolation as exc:
        raise ConfigurationError(f"bad hyper-parameters: {exc}") from exc


def stored_world(out: Path) -> WorldSpec:
    path = out / "world.json"
    if not path.exists():
        raise ConfigurationError(f"{path} not found; run 'simulate' first")
    return WorldSpec.from_dict(_read_json(path))


def resolve_split(cfg: dict, spec: WorldSpec) -> int:
    split = spec.horizon // 2 if cfg["split_ts"] is None else int(cfg["split_ts"])
    if not 0 < split < spec.horizon:
        raise ConfigurationError(f"split_ts {split} lies outside the log's time range (0, {spec.horizon})")
    return split


def _require(path: Path) -> Path:
    if not path.exists():
        raise OSError(f"required file {path} does not exist")
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from exc
    return path


# -- commands ----------------------------------------------------------------

def cmd_simulate(cfg: dict) -> dict[str, Path]:
    out = _mkdir(Path(cfg["out"]))
    spec = build_world_spec(cfg)
    world = generate_world(spec)
    paths = {"world": out / "world.json", "exploration": out / "exploration.jsonl"}
    _write_json(paths["world"], spec.to_dict())
    records, truth = generate_exploration_log(world, with_truth=True)
    n = write_log(records, paths["exploration"])
    if cfg["truth"]:
        paths["truth"] = out / "exploration.truth.jsonl"
        write_log(records, paths["truth"], truth=truth)
    if cfg["control_log"]:
        paths["control"] = out / "control.jsonl"
        write_log(generate_control_log(world), paths["control"])
    log.info("wrote %d exploration sessions to %s", n, paths["exploration"])
    return paths


def cmd_train(cfg: dict, source: str = "all") -> dict[str, Path]:
    out = Path(cfg["out"])
    spec = stored_world(out)
    hyper = build_hyper(cfg, spec)
    split = resolve_split(cfg, spec)
    if source == "all":
        sources = recipes_for(cfg["policies"])
    elif source in RECIPES:
        sources = [source]
    else:
        raise ConfigurationError(f"unknown training source {source!r}; known: {', '.join(RECIPES)}, all")
    exploration, control = [], []
    if any(s.startswith("exploration") for s in sources):
        exploration, _ = split_log(read_log(_require(out / "exploration.jsonl")), split)
    if any(s.startswith("control") for s in sources):
        control, _ = split_log(read_log(_require(out / "control.jsonl")), split)
    models_dir = _mkdir(out / "models")
    written = {}
    for recipe in sources:
        path = models_dir / MODEL_FILES[recipe]
        train_model(recipe, hyper, exploration, control).save(path)
        written[recipe] = path
        log.info("trained %s -> %s", recipe, path)
    return written


def cmd_replay(cfg: dict) -> str:
    out = Path(cfg["out"])
    spec = stored_world(out)
    hyper = build_hyper(cfg, spec)
    split = resolve_split(cfg, spec)
    models: dict[str, ModelState] = {}
    for name in cfg["policies"]:
        recipe = REQUIRED_MODEL.get(name)
        if recipe is None or recipe in models:
            continue
        path = out / "models" / MODEL_FILES[recipe]
        if not path.exists():
            raise ConfigurationError(f"policy {name!r} needs the model file {path}; run 'train' first")
        models[recipe] = ModelState.load(path)
    _, test = split_log(read_log(_require(out / "exploration.jsonl")), split)
    reports = []
    for name in cfg["policies"]:
        policy = make_policy(name, hyper, models, epsilon=cfg["epsilon"], rng_seed=cfg["seed"],
                             mode=cfg["mode"])
        reports.append(replay(policy, test, reveal_interval=cfg["reveal_interval"],
                              bucket_seconds=cfg["bucket_seconds"]))
    rdir = _mkdir(out / "reports")
    for seg in ("by_impressions", "by_query_length"):
        write_segments_csv(reports, rdir / f"segments_{seg}.csv", seg)
    write_reports_csv(reports, rdir / "reports.csv")
    write_click_metrics_csv(reports, rdir / "click_metrics.csv")
    write_series_csv(reports, rdir / "series.csv", cfg["bucket_seconds"])
    _write_json(rdir / "reports.json", [r.to_dict() for r in reports])
    table = format_table(reports)
    (rdir / "table.txt").write_text(table, encoding="utf-8")
    return table


def cmd_run(cfg: dict) -> str:
    cmd_simulate(cfg)
    cmd_train(cfg, "all")
    return cmd_replay(cfg)


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--policies", nargs="+", metavar="NAME",
                        help="policy names, or 'all' (quote names with parentheses)")
    common.add_argument("--reveal-interval", dest="reveal_interval", type=float,
                        help="feedback batching interval in seconds")
    common.add_argument("--split-ts", dest="split_ts", type=int, help="train/test split timestamp")
    common.add_argument("--epsilon", type=float, help="exploration rate of every policy")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="clickrerank",
                                     description="Click-feedback re-ranking: simulate, train, replay.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate exploration and control logs")
    train = sub.add_parser("train", parents=[common], help="fit batch models on the training split")
    train.add_argument("--source", default="all", choices=[*RECIPES, "all"])
    sub.add_parser("replay", parents=[common], help="replay policies on the test split")
    sub.add_parser("run", parents=[common], help="simulate, train and replay in one go")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.source)
        elif args.command == "replay":
            sys.stdout.write(cmd_replay(cfg))
        else:
            sys.stdout.write(cmd_run(cfg))
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
