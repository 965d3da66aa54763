"""Command-line entry point: ``grape <command> [options]``.

Exit codes: 0 success, 1 configuration error (bad flag, config key or
value, unreadable dataset), 2 runtime failure during an experiment.

Precedence for every setting: preset defaults < ``--config`` JSON file <
command-line flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import DataError
from .experiments import (AGGREGATOR_ARMS, PRESET_EPOCHS, SWEEP_RATES, ExperimentError,
                          ExperimentReport, ExperimentSpec, load_dataset, preset_config, run_experiment)
from .model import ConfigError, GrapeConfig
from .training import TrainConfig

log = logging.getLogger("grape")

RUN_CONFIG_NAME = "run_config.json"
ABLATIONS = {"dropout": "ablate_dropout", "aggregator": "ablate_aggregator",
             "end_to_end": "ablate_end_to_end"}
# spec fields settable from a config file; train_config comes from "train"/"grape"
SPEC_KEYS = {f.name for f in fields(ExperimentSpec)} - {"train_config", "protocol"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"grape"}
RUN_KEYS = SPEC_KEYS | {"preset", "train", "grape"}


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _rates(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"rates must be comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grape", description="Graph-based missing-data imputation and label prediction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    g = common.add_argument_group("data")
    g.add_argument("--data", help="CSV path, uci:<name> or synthetic:<k=v,...>")
    g.add_argument("--header", action="store_true", default=None, help="CSV has a header row")
    g.add_argument("--schema", dest="schema_path", help="JSON column-schema sidecar for the CSV")
    g.add_argument("--label-column", help="label column (index or header name)")
    g = common.add_argument_group("experiment")
    g.add_argument("--config", help="JSON run config; flags override its values")
    g.add_argument("--rate", type=float, help="missing rate")
    g.add_argument("--trials", dest="n_trials", type=int)
    g.add_argument("--seed", type=int, help="base seed; determines every output")
    g.add_argument("--baselines", help="comma-separated baseline names (mean, knn); '' for none")
    g.add_argument("--jobs", type=int, help="parallel trials (default 1)")
    g.add_argument("--timing", action="store_true", default=None, help="record per-phase wall clock")
    g.add_argument("--out", dest="output_dir", help="run directory (default $GRAPE_RUN_DIR/<command>-<hash>)")
    g.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    g = common.add_argument_group("training")
    g.add_argument("--preset", choices=sorted(PRESET_EPOCHS), help="full (20000 epochs) or desk (4000)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", dest="learning_rate", type=float)
    g.add_argument("--dropout", dest="edge_dropout", type=float, help="edge dropout rate")
    g.add_argument("--eval-every", type=int)
    g.add_argument("--precision", choices=["float64", "float32"])
    g.add_argument("--layers", dest="n_layers", type=int)
    g.add_argument("--hidden", dest="hidden_dim", type=int)
    g.add_argument("--aggregator", choices=list(AGGREGATOR_ARMS))
    g.add_argument("--message-source", choices=["neighbor_embedding", "literal_self_embedding"])

    sub.add_parser("impute", parents=[common], help="feature imputation experiment")
    p = sub.add_parser("predict", parents=[common], help="label prediction experiment")
    p.add_argument("--compare", action="store_true", default=None,
                   help="also run impute-then-predict with paired seeds")
    p = sub.add_parser("sweep", parents=[common], help="imputation over several missing rates")
    p.add_argument("--rates", type=_rates, help="comma-separated rates (default 0.1,0.3,0.5,0.7)")
    p = sub.add_parser("generalize", parents=[common], help="train on some rows, evaluate on unseen rows")
    p.add_argument("--train-frac", dest="train_fraction", type=float)
    p = sub.add_parser("ablate", parents=[common], help="paired ablation arms")
    p.add_argument("--which", required=True, choices=sorted(ABLATIONS))
    p = sub.add_parser("info", help="dataset summary")
    p.add_argument("--data", required=True)
    p.add_argument("--header", action="store_true")
    p.add_argument("--schema", dest="schema_path")
    p.add_argument("--label-column")
    return parser


# ---------------------------------------------------------------- config resolution


def _protocol(args) -> str:
    if args.command == "ablate":
        return ABLATIONS[args.which]
    return {"impute": "impute", "predict": "predict", "sweep": "sweep", "generalize": "generalize"}[args.command]


def _read_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for section, known in (("train", TRAIN_KEYS), ("grape", {f.name for f in fields(GrapeConfig)})):
        bad = set(doc.get(section, {})) - known
        if bad:
            raise ConfigError(f"unknown {section} key(s): {', '.join(sorted(bad))}")
    return doc


def resolve_spec(args) -> tuple[ExperimentSpec, str]:
    """Merge preset defaults, the config file and flags into a validated spec."""
    protocol = _protocol(args)
    doc = _read_config(args.config)
    preset = args.preset or doc.get("preset", "full")
    task = "label_prediction" if protocol in ("predict", "ablate_end_to_end") else "imputation"
    train = preset_config(preset, task)

    train_over = dict(doc.get("train", {}))
    for k in ("epochs", "learning_rate", "edge_dropout", "eval_every", "precision", "seed"):
        v = getattr(args, k, None)
        if v is not None:
            train_over[k] = v
    grape_over = dict(doc.get("grape", {}))
    for k in ("n_layers", "hidden_dim", "aggregator", "message_source"):
        v = getattr(args, k, None)
        if v is not None:
            grape_over[k] = v
    grape = GrapeConfig.from_dict({**train.grape.to_dict(), **grape_over})
    train = TrainConfig.from_dict({**train.to_dict(), **train_over, "grape": grape})

    spec_kw = {k: v for k, v in doc.items() if k in SPEC_KEYS}
    flags = {
        "dataset": args.data, "n_trials": args.n_trials, "seed": args.seed, "jobs": args.jobs,
        "timing": args.timing, "output_dir": args.output_dir, "header": args.header,
        "schema_path": args.schema_path, "label_column": args.label_column,
        "compare": getattr(args, "compare", None), "train_fraction": getattr(args, "train_fraction", None),
    }
    spec_kw.update({k: v for k, v in flags.items() if v is not None})
    if args.baselines is not None:
        spec_kw["baselines"] = [b.strip() for b in args.baselines.split(",") if b.strip()]
    if getattr(args, "rates", None) is not None:
        spec_kw["missing_rates"] = args.rates
    elif args.rate is not None:
        spec_kw["missing_rates"] = [args.rate]
    elif protocol == "sweep" and "missing_rates" not in spec_kw:
        spec_kw["missing_rates"] = list(SWEEP_RATES)
    if not spec_kw.get("dataset"):
        raise ConfigError("no dataset: pass --data or set 'dataset' in the config")
    ds = str(spec_kw["dataset"])
    if task == "label_prediction" and spec_kw.get("label_column") is None and \
            not ds.startswith(("uci:", "synthetic")):
        raise ConfigError("predict needs --label-column for CSV data")
    if "seed" in spec_kw and "seed" not in train_over:
        train = replace(train, seed=spec_kw["seed"])
    spec = ExperimentSpec(protocol=protocol, train_config=train, **spec_kw)
    return spec, preset


def _run_dir(spec: ExperimentSpec, command: str) -> str:
    if spec.output_dir:
        return spec.output_dir
    root = os.environ.get("GRAPE_RUN_DIR", "runs")
    return str(Path(root) / f"{command}-{spec.config_hash()}")


def resolved_config(spec: ExperimentSpec, preset: str) -> dict:
    """Fully expanded config in the file layout accepted by ``--config``."""
    d = spec.to_dict()
    tc = d.pop("train_config")
    d.pop("protocol")
    grape = tc.pop("grape")
    return {**d, "preset": preset, "train": tc, "grape": grape}


# ---------------------------------------------------------------- output


def format_table(report: ExperimentReport) -> str:
    lines = [f"{'method':<28} {'rate':>5} {'metric':>6} {'mean':>10} {'std':>10} {'n':>3}"]
    for a in report.aggregates:
        mean = "null" if a["mean"] is None else f"{a['mean']:.4f}"
        std = "null" if a["std"] is None else f"{a['std']:.4f}"
        lines.append(f"{a['method']:<28} {a['rate']:>5g} {a['metric']:>6} {mean:>10} {std:>10} {a['n']:>3}")
    return "\n".join(lines)


def cmd_info(args) -> int:
    ds = load_dataset(args.data, args.label_column, args.header, args.schema_path)
    x = ds.features
    print(f"dataset: {ds.name}")
    print(f"rows: {x.n}  features: {x.m}  categorical: {len(x.categorical_columns)}")
    print(f"{'col':>4} {'name':<24} {'kind':<12} {'min':>10} {'max':>10} {'mean':>10}")
    for c in x.schema:
        col = x.values[:, c.index]
        kind = f"cat({c.cardinality})" if c.is_categorical else "continuous"
        print(f"{c.index:>4} {c.name or '':<24} {kind:<12} {col.min():>10.4g} {col.max():>10.4g} {col.mean():>10.4g}")
    if ds.labels is not None:
        y = ds.labels
        print(f"labels: n={y.size} min={y.min():.4g} max={y.max():.4g} mean={y.mean():.4g} std={np.std(y):.4g}")
    return 0


def cmd_experiment(args) -> int:
    spec, preset = resolve_spec(args)
    run_dir = _run_dir(spec, args.command)
    spec = replace(spec, output_dir=run_dir)
    ds = load_dataset(spec.dataset, spec.label_column, spec.header, spec.schema_path)
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / RUN_CONFIG_NAME).write_text(json.dumps(resolved_config(spec, preset), indent=2, sort_keys=True))
    try:
        report = run_experiment(spec, ds)
    except (ExperimentError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(format_table(report))
    print(f"run directory: {run_dir}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        if args.command == "info":
            return cmd_info(args)
        return cmd_experiment(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else escaping a run is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
