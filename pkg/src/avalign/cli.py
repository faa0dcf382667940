"""Command-line entry point.

    avalign gen        --out data/
    avalign train      --data data/ --out run/ --loss mtsc
    avalign eval       --model run/model.json --data data/ --split test --out eval/
    avalign select     --out select/ --protocol both
    avalign gradcheck  --out grad/
    avalign reproduce  --out repro/

Configuration comes from built-in defaults, then ``--config`` (a JSON file or
a previous ``run.json``), then ``--set section.key=value`` overrides. The seed
is taken from ``--seed``, else ``$AVALIGN_SEED``, else the config.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .core import DatasetFormatError, ValidationError, load_dataset, save_splits, split_dataset
from .datagen import GenConfig, generate_dataset, make_family, save_families
from .experiments import DeskBudget, reproduce, selection_verdicts
from .gradsuite import run_gradient_suite
from .losses import LossConfig, TimeLagKernel
from .metrics import parsing_report, reports_json
from .model import load_model, save_model
from .selector import DEFAULT_METRIC, PROTOCOLS, LadderSpec, SelectionError, collocation_families, compare_collocations, family_ladder
from .trainer import LOSS_PRESETS, TrainConfig, TrainingError, evaluate, train

log = logging.getLogger("avalign")

SEED_ENV = "AVALIGN_SEED"
SPLIT_NAMES = ("train", "eval", "test")
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
PROTOCOL_FLAGS = {"traversal": ("traversal",), "upper": ("upper_bound",), "both": PROTOCOLS}


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class SelectorSettings:
    seeds: int = 5
    metric: str = DEFAULT_METRIC
    protocol: str = "both"
    ladder: LadderSpec = LadderSpec()

    def __post_init__(self):
        if self.seeds <= 0:
            raise ValueError("selector.seeds must be positive")
        if self.protocol not in PROTOCOL_FLAGS:
            raise ValueError(f"selector.protocol must be one of {sorted(PROTOCOL_FLAGS)}")


@dataclass(frozen=True)
class TrainSection:
    """TrainConfig without the nested loss, which has its own section."""

    batch_size: int = 16
    epochs: int = 40
    lr0: float = 3e-4
    decay: float = 0.1
    decay_every: int = 10
    lambda_mtsc: float = 1.0
    objective: str = "mtsc"
    hidden: int = 32
    proj: int | None = None
    shared_projection: bool = True
    tied_adapters: bool = False
    pooling: str = "attention"
    preserve_audio_g: bool = False
    early_stop: bool = False
    patience: int = 5
    min_delta: float = 1e-5


@dataclass(frozen=True)
class LossSection:
    temperature: float = 0.5
    mode: str = "squared"
    scope: str = "full"
    exponent: float = 5.0
    diagonal_value: float = 1.0

    def build(self) -> LossConfig:
        return LossConfig(self.temperature, self.mode, self.scope, TimeLagKernel(self.exponent, self.diagonal_value))


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenConfig = GenConfig()
    train: TrainSection = TrainSection()
    loss: LossSection = LossSection()
    selector: SelectorSettings = SelectorSettings()
    budget: DeskBudget = DeskBudget()
    out: str = "out"
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), "seed": self.seed}, loss=self.loss.build())

    def gen_config(self) -> GenConfig:
        return replace(self.gen, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def _from_dict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _from_dict(type(current), value, f"{where}.{name}" if where else name)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _apply_override(blob: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = blob
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"--set {key}: {p!r} is not a config section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"--set {key}: unknown key")
    node[parts[-1]] = value


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for k, v in update.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path)
        else:
            base[k] = v
    return base


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    blob = ExperimentConfig().to_dict()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc.msg}") from exc
        if isinstance(loaded, dict) and "command" in loaded and "config" in loaded:
            loaded = loaded["config"]  # a previous run.json
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        _merge(blob, loaded)
    for assignment in args.set or ():
        _apply_override(blob, assignment)
    if getattr(args, "loss", None):
        objective, loss = LOSS_PRESETS[args.loss]
        blob["train"]["objective"] = objective
        if loss is not None:
            blob["loss"]["mode"], blob["loss"]["scope"] = loss.mode, loss.scope
    if getattr(args, "protocol", None):
        blob["selector"]["protocol"] = args.protocol
    if args.out:
        blob["out"] = args.out
    env_seed = os.environ.get(SEED_ENV)
    if args.seed is not None:
        blob["seed"] = args.seed
    elif env_seed is not None:
        try:
            blob["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"${SEED_ENV} must be an integer, got {env_seed!r}") from exc
    if isinstance(blob["gen"], dict):
        blob["gen"]["seed"] = blob["seed"]
    return _from_dict(ExperimentConfig, blob, "")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, blob) -> None:
    _write(path, json.dumps(blob, indent=2, sort_keys=True) + "\n")


def write_run_record(out: Path, command: str, config: ExperimentConfig, args: dict) -> None:
    _write_json(out / "run.json", {"command": command, "args": args, "seed": config.seed, "config": config.to_dict()})


# --- subcommands --------------------------------------------------------------

def _families(cfg: ExperimentConfig):
    gen = cfg.gen_config()
    audio = make_family("audio-base", gen.D_audio, gen.L, seed=10_000 + cfg.seed)
    visual = make_family("visual-base", gen.D_visual, gen.L, seed=20_000 + cfg.seed)
    return audio, visual


def cmd_gen(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    gen = cfg.gen_config()
    audio, visual = _families(cfg)
    dataset = generate_dataset(gen, audio, visual)
    parts = split_dataset(dataset, (0.6, 0.2, 0.2), seed=cfg.seed)
    save_splits(out, dict(zip(SPLIT_NAMES, parts)), {"generator": asdict(gen), "families": [audio.name, visual.name]})
    save_families(out / "families.json", [audio, visual])
    write_run_record(out, "gen", cfg, {})
    print(f"wrote {len(dataset)} videos to {out}")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    dataset = load_dataset(args.data, args.split)
    config = cfg.train_config()
    params, history = train(dataset, config)
    save_model(out / "model.json", params, config.dims(dataset), {"objective": config.objective, "seed": config.seed})
    _write(out / "history.csv", history.to_csv(with_seconds=False))
    _write(out / "timings.csv", history.to_csv(with_seconds=True))
    write_run_record(out, "train", cfg, {"data": str(args.data), "split": args.split})
    last = history.records[-1] if history.records else None
    print(f"trained {len(history)} epochs" + (f", final loss {last.total:.6f}" if last else ""))
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    dataset = load_dataset(args.data, args.split)
    if args.predictions:
        predicted = load_dataset(args.predictions, args.split)
        if [s.id for s in predicted.samples] != [s.id for s in dataset.samples]:
            raise ValidationError("prediction ids do not match the evaluated split")
        parsing, alignment = parsing_report(predicted.label_masks(), dataset.label_masks()), None
    elif args.model:
        params, dims = load_model(args.model)
        if (dims.D_audio, dims.D_visual, dims.C) != (dataset.D_audio, dataset.D_visual, dataset.C):
            raise ValidationError(f"model dims {dims} do not fit the dataset")
        parsing, alignment = evaluate(params, dataset, cfg.train.pooling)
    else:
        raise UsageError("eval needs --model or --predictions")
    _write(out / "report.json", reports_json(parsing, alignment))
    _write(out / "parsing.csv", parsing.to_csv())
    write_run_record(out, "eval", cfg, {"data": str(args.data), "split": args.split, "model": args.model, "predictions": args.predictions})
    print(parsing.to_csv(), end="")
    return EXIT_OK


def cmd_select(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    gen = cfg.gen_config()
    collocations = family_ladder(gen, cfg.selector.ladder)
    seeds = list(range(cfg.seed, cfg.seed + cfg.selector.seeds))
    report = compare_collocations(
        collocations, gen, cfg.train_config(), seeds, cfg.selector.metric, PROTOCOL_FLAGS[cfg.selector.protocol], args.jobs
    )
    _write(out / "selection.csv", report.to_csv())
    _write(out / "scores.csv", report.to_csv(with_seconds=False))
    _write(out / "summary.json", report.summary_json(with_seconds=False))
    timing = report.summary(with_seconds=True)
    _write_json(out / "timings.json", {"seconds": timing["seconds"], "time_ratio": timing["time_ratio"]})
    save_families(out / "families.json", collocation_families(collocations))
    write_run_record(out, "select", cfg, {"jobs": args.jobs})
    if cfg.selector.protocol == "both":
        for v in selection_verdicts(report):
            print(v.line())
    return EXIT_OK


def cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    suite = run_gradient_suite(seed=cfg.seed)
    summary = suite.summary()
    _write_json(out / "gradcheck.json", summary)
    write_run_record(out, "gradcheck", cfg, {})
    print(f"{'PASS' if suite.passed else 'FAIL'}: {summary['instances']} instances, max relative error {suite.max_rel_error:.3g}")
    return EXIT_OK if suite.passed else EXIT_RUNTIME


def cmd_reproduce(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    seeds = range(cfg.seed, cfg.seed + cfg.selector.seeds)
    result = reproduce(seeds, cfg.gen, cfg.budget, cfg.selector.ladder, args.jobs)
    _write_json(out / "report.json", result.report)
    _write_json(out / "timings.json", result.timings)
    _write(out / "verdicts.txt", "".join(v.line() + "\n" for v in result.verdicts))
    write_run_record(out, "reproduce", cfg, {"jobs": args.jobs})
    for v in result.verdicts:
        print(v.line())
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "select": cmd_select,
    "gradcheck": cmd_gradcheck,
    "reproduce": cmd_reproduce,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file or a previous run.json")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. train.epochs=5")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help=f"global seed (overrides ${SEED_ENV})")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="avalign", description="Contrastive audio-visual alignment experiments on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a model on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--loss", choices=sorted(LOSS_PRESETS))
    p = sub.add_parser("eval", parents=[common], help="score a model or a prediction file on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--model")
    p.add_argument("--predictions", help="dataset directory whose labels are the predictions")
    p = sub.add_parser("select", parents=[common], help="compare extractor collocations under both protocols")
    p.add_argument("--loss", choices=sorted(LOSS_PRESETS))
    p.add_argument("--protocol", choices=sorted(PROTOCOL_FLAGS))
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss and the model")
    sub.add_parser("reproduce", parents=[common], help="run every acceptance experiment")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("avalign: error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = resolve_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"avalign: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ValidationError, DatasetFormatError, SelectionError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"avalign: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"avalign: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
