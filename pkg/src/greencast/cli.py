"""Command-line surface: generate | train | evaluate | report.

Config files are JSON; command-line flags override config fields. Exit
codes: 0 ok, 1 usage error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backbones import EncoderDecoderConfig
from .conditioning import ConditioningConfig
from .data import CubeDataset
from .errors import (
    ContractViolationError,
    FormatError,
    InsufficientDataError,
    TrainingDivergedError,
)
from .evaluation import write_score_table
from .minicube import SplitSpec, SyntheticWorldParams, generate_dataset
from .models import FAMILIES, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .pipeline import (
    BASELINES,
    attach_outperformance,
    dataset_hash,
    evaluate_baseline,
    evaluate_model,
)
from .report import render_report
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

DEFAULT_COUNTS = {"train": 200, "val": 20, "ood-t": 40}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FormatError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"config file {p} is not valid JSON: {e}") from e


def cmd_generate(args) -> int:
    conf = _load_config(args.config)
    params_dict = dict(conf.get("params", {}))
    if args.seed is not None:
        params_dict["seed"] = args.seed
    params = SyntheticWorldParams(**params_dict)
    counts = {str(k): int(v) for k, v in conf.get("counts", DEFAULT_COUNTS).items()}
    if args.count:
        counts = {k: v for k, v in (kv.split("=") for kv in args.count)}
        counts = {k: int(v) for k, v in counts.items()}
    spec = (SplitSpec.from_dict(conf["splits"]) if "splits" in conf
            else SplitSpec())
    spec.validate()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_DATA
    manifest = generate_dataset(params, counts, out, split_spec=spec)
    total = sum(len(v) for v in manifest["cubes"].values())
    print(f"wrote {total} minicubes to {out} (hash {dataset_hash(out)})")
    return EXIT_OK


def _model_config_from_args(args, conf: dict) -> ModelConfig:
    model_conf = dict(conf.get("model", {}))
    if args.family:
        model_conf["family"] = args.family
    if "family" not in model_conf:
        raise ContractViolationError("no model family given (--family)")
    if args.meteo is not None:
        model_conf["meteo"] = args.meteo == "on"
    if args.seed is not None:
        model_conf["seed"] = args.seed
    if args.hidden is not None:
        model_conf["hidden"] = args.hidden
    if "conditioning" in model_conf and isinstance(model_conf["conditioning"], dict):
        model_conf["conditioning"] = ConditioningConfig(**model_conf["conditioning"])
    if "encoder" in model_conf and isinstance(model_conf["encoder"], dict):
        model_conf["encoder"] = EncoderDecoderConfig(**model_conf["encoder"])
    return ModelConfig(**model_conf)


def cmd_train(args) -> int:
    conf = _load_config(args.config)
    model_config = _model_config_from_args(args, conf)
    train_conf = dict(conf.get("train", {}))
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch_size),
                     ("learning_rate", args.lr), ("seed", args.seed)):
        if val is not None:
            train_conf[key] = val
    train_conf["shuffle_space"] = bool(args.shuffle)
    tconf = TrainConfig(**train_conf)

    train_data = CubeDataset(args.data, "train", limit=args.limit)
    val_data = CubeDataset(args.data, "val", limit=args.limit)
    model = build_model(model_config)
    out = Path(args.out)
    try:
        model, log = train(model, train_data, val_data, tconf)
    except TrainingDivergedError as e:
        model.load_state_dict(e.state_dict)
        save_checkpoint(model, out, history=e.log.entries if e.log else [])
        if e.log:
            e.log.to_jsonl(out / "trainlog.jsonl")
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(model, out, history=log.entries)
    log.to_jsonl(out / "trainlog.jsonl")
    last = log.entries[-1] if log.entries else {}
    print(f"trained {model_config.family} for {len(log.entries)} epochs "
          f"(val RMSE {last.get('val_rmse')}) -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = CubeDataset(args.data, args.split, limit=args.limit)
    dhash = dataset_hash(args.data)
    baselines = list(dict.fromkeys(args.baseline or []))
    for b in baselines:
        if b not in BASELINES:
            print(f"error: unknown baseline {b!r} "
                  f"(choose from {', '.join(BASELINES)})", file=sys.stderr)
            return EXIT_USAGE

    tables = {}
    reference = None
    need_reference = args.checkpoint or baselines
    if need_reference:
        try:
            reference = evaluate_baseline(dataset, "climatology")
            reference.dataset_hash = dhash
        except InsufficientDataError as e:
            print(f"note: no climatology reference ({e}); "
                  "outperformance not computed", file=sys.stderr)

    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not (ckpt / "manifest.json").exists():
            print(f"error: checkpoint not found at {ckpt}", file=sys.stderr)
            return EXIT_DATA
        model, _ = load_checkpoint(ckpt)
        shuffle_seed = args.seed or 0 if args.shuffle else None
        table = evaluate_model(dataset, model, shuffle_seed=shuffle_seed)
        tables[f"{model.config.family}" + ("_shuffled" if args.shuffle else "")] = table
    for b in baselines:
        if b == "climatology" and reference is not None:
            tables[b] = reference
            continue
        tables[b] = evaluate_baseline(dataset, b)

    for name, table in tables.items():
        table.dataset_hash = dhash
        if reference is not None:
            attach_outperformance(table, reference)
        csv_path, json_path = write_score_table(table, out / name)
        op = ("" if table.outperformance is None
              else f" outperformance {100 * table.outperformance:.1f}%")
        print(f"{name}: rmse {table.macro.get('rmse', float('nan')):.4f} "
              f"r2 {table.macro.get('r2', float('nan')):.4f}{op} -> {csv_path}")
    if not tables:
        print("error: nothing to evaluate (give --checkpoint or --baseline)",
              file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_report(args) -> int:
    manifest = render_report(args.scores, args.out, allow_mixed=args.allow_mixed)
    for warning in manifest["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"report written to {args.out} "
          f"({len(manifest['files'])} figures)")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="greencast",
                     description="weather-conditioned NDVI forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic minicube benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON with params/counts/splits")
    g.add_argument("--seed", type=int)
    g.add_argument("--count", action="append", metavar="SPLIT=N",
                   help="override cube counts, e.g. --count train=200")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a forecaster")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON with model/train sections")
    t.add_argument("--family", choices=FAMILIES)
    t.add_argument("--meteo", choices=["on", "off"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--shuffle", action="store_true",
                   help="train on spatially shuffled pixels")
    t.add_argument("--limit", type=int, help="cap cubes per split")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint and/or baselines")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="ood-t")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", action="append",
                   help=f"one of {', '.join(BASELINES)} (repeatable)")
    e.add_argument("--out", required=True)
    e.add_argument("--shuffle", action="store_true",
                   help="evaluate under spatial shuffling")
    e.add_argument("--seed", type=int)
    e.add_argument("--limit", type=int)
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("report", help="render figures from score summaries")
    r.add_argument("--scores", nargs="+", required=True,
                   help="summary JSON files from evaluate")
    r.add_argument("--out", required=True)
    r.add_argument("--allow-mixed", action="store_true")
    r.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (FormatError, InsufficientDataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ContractViolationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
