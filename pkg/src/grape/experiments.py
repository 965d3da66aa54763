"""Seeded multi-trial experiment protocols and their reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import subprocess
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .baselines import BASELINES, linear_regression_fit_predict, run_baseline
from .dataset import (DataError, DataMatrix, MaskMatrix, apply_scaler, fit_scaler,
                      load_csv, load_schema, load_uci, make_synthetic, minmax_scale, sample_mask,
                      split_label_column, split_labels, split_rows)
from .graph import build_graph
from .metrics import compute_metrics
from .model import ConfigError, GrapeConfig, GraphDims, impute_full, save_checkpoint
from .rng import derive_seed
from .training import (TrainConfig, impute_then_predict, label_config,
                       predict_labels, train_imputation, train_label_prediction)

log = logging.getLogger(__name__)

PROTOCOLS = ("impute", "predict", "sweep", "generalize",
             "ablate_dropout", "ablate_aggregator", "ablate_end_to_end")
PRESET_EPOCHS = {"full": 20000, "desk": 4000}
SWEEP_RATES = (0.1, 0.3, 0.5, 0.7)
DROPOUT_ARMS = (0.0, 0.3)
AGGREGATOR_ARMS = ("sum", "max", "mean")
REPORT_FORMAT = "grape-report"
REPORT_VERSION = 1
CSV_COLUMNS = ("dataset", "method", "rate", "trial", "metric", "value")

# hyperparameters of the two task families; only epochs differ between presets
IMPUTATION_GRAPE = GrapeConfig()
PREDICTION_GRAPE = GrapeConfig(n_layers=2, hidden_dim=16, edge_head="linear", node_head="linear")


class ExperimentError(RuntimeError):
    pass


def preset_config(preset: str, task: str = "imputation", **overrides) -> TrainConfig:
    """TrainConfig for a named preset; ``task`` picks the imputation or prediction network."""
    if preset not in PRESET_EPOCHS:
        raise ConfigError(f"preset must be one of {tuple(PRESET_EPOCHS)}, got {preset!r}")
    grape = IMPUTATION_GRAPE if task == "imputation" else PREDICTION_GRAPE
    kw = {"epochs": PRESET_EPOCHS[preset], "grape": grape, "task": task}
    kw.update(overrides)
    return TrainConfig(**kw)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    name: str
    features: DataMatrix
    labels: Optional[np.ndarray] = None


def _parse_synthetic(body: str) -> dict:
    opts = {"n": 50, "m": 6, "rank": 1, "noise": 0.0, "seed": 0, "labels": "sum"}
    casts = {"n": int, "m": int, "rank": int, "noise": float, "seed": int, "labels": str}
    for item in filter(None, body.split(",")):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in opts:
            raise ConfigError(f"bad synthetic option {item!r}; known keys: {', '.join(opts)}")
        opts[key] = casts[key](value.strip())
    if opts["labels"] not in ("sum", "squares"):
        raise ConfigError("synthetic labels must be 'sum' or 'squares'")
    return opts


def load_dataset(descriptor: str, label_column: Union[int, str, None] = None, header: bool = False,
                 schema_path: Optional[str] = None) -> Dataset:
    """Resolve ``uci:<name>``, ``synthetic:<k=v,...>`` or a CSV path.

    Synthetic data is a noiseless/noisy low-rank matrix; its labels are the
    clean row sums (``labels=sum``) or row sums of squared clean values
    (``labels=squares``). For CSV input ``label_column`` (index, or name
    when the file has a header) is split off as the label vector.
    """
    if descriptor.startswith("uci:"):
        feats, target = load_uci(descriptor[4:])
        return Dataset(descriptor, feats, target)
    if descriptor.startswith("synthetic"):
        opts = _parse_synthetic(descriptor.partition(":")[2])
        feats, sums = make_synthetic(opts["n"], opts["m"], opts["rank"], opts["noise"], opts["seed"])
        if opts["labels"] == "squares":
            clean, _ = make_synthetic(opts["n"], opts["m"], opts["rank"], 0.0, opts["seed"])
            labels = (clean.values ** 2).sum(axis=1)
        else:
            labels = sums
        return Dataset(descriptor, feats, labels)
    schema = load_schema(schema_path) if schema_path else "infer"
    data = load_csv(descriptor, schema=schema, header=header)
    if label_column is None:
        return Dataset(Path(descriptor).stem, data, None)
    if isinstance(label_column, str):
        if label_column.lstrip("-").isdigit():
            label_column = int(label_column)
        elif label_column in data.names:
            label_column = data.names.index(label_column)
        else:
            raise DataError(f"no column named {label_column!r} in {descriptor}")
    feats, labels = split_label_column(data, label_column)
    return Dataset(Path(descriptor).stem, feats, labels)


# ---------------------------------------------------------------- spec


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str
    protocol: str = "impute"
    missing_rates: tuple = (0.3,)
    n_trials: int = 5
    train_config: TrainConfig = field(default_factory=TrainConfig)
    baselines: tuple = ("mean",)
    output_dir: Optional[str] = None
    seed: int = 0
    train_fraction: float = 0.7
    label_column: Union[int, str, None] = None
    header: bool = False
    schema_path: Optional[str] = None
    compare: bool = False
    jobs: int = 1
    timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "missing_rates", tuple(float(r) for r in self.missing_rates))
        object.__setattr__(self, "baselines", tuple(self.baselines))
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.n_trials < 1:
            raise ConfigError(f"n_trials must be >= 1, got {self.n_trials}")
        if not self.missing_rates:
            raise ConfigError("missing_rates must be nonempty")
        for r in self.missing_rates:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"missing rate must lie in [0, 1), got {r}")
        for b in self.baselines:
            if b not in BASELINES:
                raise ConfigError(f"unknown baseline {b!r}; available: {', '.join(BASELINES)}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment key(s): {', '.join(sorted(unknown))}")
        if isinstance(d.get("train_config"), dict):
            d["train_config"] = TrainConfig.from_dict(d["train_config"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train_config"] = self.train_config.to_dict()
        d["missing_rates"] = list(self.missing_rates)
        d["baselines"] = list(self.baselines)
        return d

    def config_hash(self) -> str:
        """Hash of everything that determines the results (not paths, jobs or timing)."""
        d = self.to_dict()
        for k in ("output_dir", "jobs", "timing"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def trial_seed(base_seed: int, trial: int) -> int:
    return derive_seed(base_seed, trial)


# ---------------------------------------------------------------- report


def _aggregate(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["method"], r["rate"], r["metric"]), []).append(r["value"])
    out = []
    for (method, rate, metric), vals in groups.items():
        finite = [v for v in vals if v is not None]
        if finite:
            arr = np.asarray(finite)
            mean, std = float(arr.mean()), float(arr.std())
        else:
            mean = std = None
        out.append({"method": method, "rate": rate, "metric": metric,
                    "mean": mean, "std": std, "n": len(finite)})
    return out


def _commit_id() -> str:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 else "unknown"


@dataclass
class ExperimentReport:
    dataset: str
    protocol: str
    rows: list[dict]
    aggregates: list[dict]
    metadata: dict
    spec: dict
    timing: Optional[list[dict]] = None
    traces: dict = field(default_factory=dict, repr=False)

    def aggregate(self, method: str, rate: Optional[float] = None, metric: str = "mae") -> dict:
        for a in self.aggregates:
            if a["method"] == method and a["metric"] == metric and (rate is None or a["rate"] == rate):
                return a
        raise KeyError((method, rate, metric))

    def values(self, method: str, rate: Optional[float] = None, metric: str = "mae") -> list:
        return [r["value"] for r in self.rows
                if r["method"] == method and r["metric"] == metric and (rate is None or r["rate"] == rate)]

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def to_dict(self) -> dict:
        d = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "dataset": self.dataset,
             "protocol": self.protocol, "metadata": self.metadata, "spec": self.spec,
             "rows": self.rows, "aggregates": self.aggregates}
        if self.timing is not None:
            d["timing"] = self.timing
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([self.dataset, r["method"], r["rate"], r["trial"], r["metric"],
                            "" if r["value"] is None else repr(r["value"])])
        for name, trace in self.traces.items():
            trace.to_csv(out / f"trace_{name}.csv")
        if len({r["rate"] for r in self.rows}) > 1:
            self.write_curve(out / "curve.csv")
        return out

    def write_curve(self, path: Union[str, Path]) -> None:
        """Per-rate aggregates, one row per (method, metric, rate), for plotting."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "metric", "rate", "mean", "std", "n"])
            for a in sorted(self.aggregates, key=lambda a: (a["method"], a["metric"], a["rate"])):
                w.writerow([a["method"], a["metric"], a["rate"],
                            "" if a["mean"] is None else repr(a["mean"]),
                            "" if a["std"] is None else repr(a["std"]), a["n"]])

    @classmethod
    def load(cls, path: Union[str, Path], tol: float = 1e-12) -> "ExperimentReport":
        """Read ``report.json`` and check that stored aggregates match the rows."""
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != REPORT_FORMAT or doc.get("version") != REPORT_VERSION:
            raise ValueError(f"{path}: not a version-{REPORT_VERSION} {REPORT_FORMAT} file")
        report = cls(doc["dataset"], doc["protocol"], doc["rows"], doc["aggregates"],
                     doc["metadata"], doc["spec"], doc.get("timing"))
        fresh = {(a["method"], a["rate"], a["metric"]): a for a in _aggregate(report.rows)}
        for a in report.aggregates:
            b = fresh.get((a["method"], a["rate"], a["metric"]))
            if b is None or a["n"] != b["n"]:
                raise ValueError(f"{path}: aggregate {a['method']}/{a['rate']} has no matching rows")
            for k in ("mean", "std"):
                if (a[k] is None) != (b[k] is None) or (a[k] is not None and abs(a[k] - b[k]) > tol):
                    raise ValueError(f"{path}: stored {k} for {a['method']}/{a['rate']} "
                                     f"does not match its rows")
        return report


# ---------------------------------------------------------------- trial cells


@dataclass
class CellResult:
    rows: list[dict]
    traces: dict
    timing: list[dict]
    model: Optional[tuple] = None  # (GrapeConfig, GraphDims, ModelParams) of the primary arm


class _Clock:
    def __init__(self):
        self.marks: list[dict] = []
        self._t = time.perf_counter()

    def lap(self, phase: str, **key):
        now = time.perf_counter()
        self.marks.append(dict(key, phase=phase, seconds=now - self._t))
        self._t = now


def _row(method, rate, trial, metric, value) -> dict:
    return {"method": method, "rate": rate, "trial": trial, "metric": metric,
            "value": None if value is None else float(value)}


def _trace_name(spec: ExperimentSpec, trial: int, method: str, rate: float) -> str:
    single = len(spec.missing_rates) == 1 and spec.protocol in ("impute", "predict", "generalize")
    return str(trial) if single and method in ("grape", "grape_train_graph") else f"{trial}_{method}_r{rate:g}"


def _imputation_arms(spec: ExperimentSpec) -> list[tuple[str, TrainConfig]]:
    base = spec.train_config
    if spec.protocol == "ablate_dropout":
        return [(f"grape_dropout_{p:g}", replace(base, edge_dropout=p)) for p in DROPOUT_ARMS]
    if spec.protocol == "ablate_aggregator":
        return [(f"grape_{a}", replace(base, grape=replace(base.grape, aggregator=a))) for a in AGGREGATOR_ARMS]
    return [("grape", base)]


def _observed_mean_mae(scaled: DataMatrix, mask: MaskMatrix) -> Optional[float]:
    region = ~mask.observed
    if not region.any():
        return None
    return compute_metrics(run_baseline("mean", scaled, mask).imputed, scaled.values, region)


def _imputation_cell(spec: ExperimentSpec, ds: Dataset, rate: float, trial: int) -> CellResult:
    clock = _Clock()
    seed = trial_seed(spec.seed, trial)
    feats = ds.features
    mask = sample_mask(feats.n, feats.m, rate, derive_seed(seed, "mask"))
    scaled = minmax_scale(feats, mask)
    region = ~mask.observed
    clock.lap("prepare", rate=rate, trial=trial)
    rows, traces, model = [], {}, None
    graph = build_graph(scaled, mask)
    for k, (method, cfg) in enumerate(_imputation_arms(spec)):
        if not region.any():
            rows += [_row(method, rate, trial, "mae", None), _row(method, rate, trial, "rmse", None)]
            continue
        cfg = replace(cfg, seed=derive_seed(seed, "train"))
        params, trace = train_imputation(scaled, mask, cfg, _progress(method, rate, trial), graph=graph)
        clock.lap("train", rate=rate, trial=trial, method=method)
        imputed = impute_full(params, graph, cfg.grape)
        rows.append(_row(method, rate, trial, "mae", compute_metrics(imputed, scaled.values, region, "mae")))
        rows.append(_row(method, rate, trial, "rmse", compute_metrics(imputed, scaled.values, region, "rmse")))
        traces[_trace_name(spec, trial, method, rate)] = trace
        if k == 0:
            model = (cfg.grape, GraphDims.of(graph, cfg.grape), params)
        clock.lap("evaluate", rate=rate, trial=trial, method=method)
    for b in spec.baselines:
        if not region.any():
            rows += [_row(b, rate, trial, "mae", None), _row(b, rate, trial, "rmse", None)]
            continue
        imputed = run_baseline(b, scaled, mask).imputed
        rows.append(_row(b, rate, trial, "mae", compute_metrics(imputed, scaled.values, region, "mae")))
        rows.append(_row(b, rate, trial, "rmse", compute_metrics(imputed, scaled.values, region, "rmse")))
        clock.lap("baseline", rate=rate, trial=trial, method=b)
    return CellResult(rows, traces, clock.marks, model)


def _prediction_cell(spec: ExperimentSpec, ds: Dataset, rate: float, trial: int) -> CellResult:
    if ds.labels is None:
        raise ExperimentError(f"dataset {ds.name} has no labels; set a label column")
    clock = _Clock()
    seed = trial_seed(spec.seed, trial)
    feats = ds.features
    mask = sample_mask(feats.n, feats.m, rate, derive_seed(seed, "mask"))
    scaled = minmax_scale(feats, mask)
    labels = split_labels(ds.labels, spec.train_fraction, derive_seed(seed, "split"))
    test = labels.test_index
    y_test = labels.labels[test]
    clock.lap("prepare", rate=rate, trial=trial)
    cfg = replace(spec.train_config, seed=derive_seed(seed, "train"))
    ablation = spec.protocol == "ablate_end_to_end"
    e2e_name = "end_to_end" if ablation else "grape"
    rows, traces = [], {}
    graph = build_graph(scaled, mask)
    params, trace = train_label_prediction(scaled, mask, labels, cfg, _progress(e2e_name, rate, trial), graph=graph)
    pred = predict_labels(params, graph, label_config(cfg))
    rows.append(_row(e2e_name, rate, trial, "mae", compute_metrics(pred[test], y_test)))
    rows.append(_row(e2e_name, rate, trial, "rmse", compute_metrics(pred[test], y_test, kind="rmse")))
    traces[_trace_name(spec, trial, e2e_name, rate)] = trace
    model = (label_config(cfg), GraphDims.of(graph, label_config(cfg)), params)
    clock.lap("train", rate=rate, trial=trial, method=e2e_name)
    if ablation or spec.compare:
        name = "impute_then_predict" if ablation else "grape_impute_then_predict"
        two = impute_then_predict(scaled, mask, labels, cfg, _progress(name, rate, trial))
        rows.append(_row(name, rate, trial, "mae", two.test_mae))
        rows.append(_row(name, rate, trial, "rmse", compute_metrics(two.predictions[test], y_test, kind="rmse")))
        traces[_trace_name(spec, trial, name, rate)] = two.trace
        clock.lap("train", rate=rate, trial=trial, method=name)
    train = labels.train_index
    for b in spec.baselines:
        imputed = run_baseline(b, scaled, mask).imputed
        p = linear_regression_fit_predict(imputed[train], labels.labels[train], imputed[test])
        rows.append(_row(f"{b}+ols", rate, trial, "mae", compute_metrics(p, y_test)))
        rows.append(_row(f"{b}+ols", rate, trial, "rmse", compute_metrics(p, y_test, kind="rmse")))
        clock.lap("baseline", rate=rate, trial=trial, method=b)
    return CellResult(rows, traces, clock.marks, model)


def _generalization_cell(spec: ExperimentSpec, ds: Dataset, rate: float, trial: int) -> CellResult:
    clock = _Clock()
    seed = trial_seed(spec.seed, trial)
    feats = ds.features
    train_rows, test_rows = split_rows(feats.n, spec.train_fraction, derive_seed(seed, "rows"))
    mask = sample_mask(feats.n, feats.m, rate, derive_seed(seed, "mask"))
    train_mask, test_mask = mask.take_rows(train_rows), mask.take_rows(test_rows)
    # scaler from observed train cells only; test rows reuse it
    scaler = fit_scaler(feats.take_rows(train_rows), train_mask)
    train_data = apply_scaler(feats.take_rows(train_rows), scaler)
    test_data = apply_scaler(feats.take_rows(test_rows), scaler)
    clock.lap("prepare", rate=rate, trial=trial)
    rows, traces = [], {}
    cfg = replace(spec.train_config, seed=derive_seed(seed, "train"))
    train_graph = build_graph(train_data, train_mask)
    params, trace = train_imputation(train_data, train_mask, cfg, _progress("grape", rate, trial), graph=train_graph)
    traces[_trace_name(spec, trial, "grape_train_graph", rate)] = trace
    clock.lap("train", rate=rate, trial=trial, method="grape")
    test_graph = build_graph(test_data, test_mask)
    for name, data, m, graph in (("train_graph", train_data, train_mask, train_graph),
                                 ("test_graph", test_data, test_mask, test_graph)):
        region = ~m.observed
        if region.any():
            imputed = impute_full(params, graph, cfg.grape)
            value = compute_metrics(imputed, data.values, region)
        else:
            value = None
        rows.append(_row(f"grape_{name}", rate, trial, "mae", value))
    for b in spec.baselines:
        for name, data, m in (("train_graph", train_data, train_mask), ("test_graph", test_data, test_mask)):
            region = ~m.observed
            value = None
            if region.any():
                value = compute_metrics(run_baseline(b, data, m).imputed, data.values, region)
            rows.append(_row(f"{b}_{name}", rate, trial, "mae", value))
    clock.lap("evaluate", rate=rate, trial=trial)
    model = (cfg.grape, GraphDims.of(train_graph, cfg.grape), params)
    return CellResult(rows, traces, clock.marks, model)


def _progress(method: str, rate: float, trial: int):
    def report(msg: dict):
        metric = msg["test_mae"]
        log.info("%s rate=%g trial=%d epoch=%d loss=%.6g test_mae=%s", method, rate, trial,
                 msg["epoch"], msg["train_loss"], "null" if metric is None else f"{metric:.6g}")
    return report


_CELLS = {
    "impute": _imputation_cell, "sweep": _imputation_cell,
    "ablate_dropout": _imputation_cell, "ablate_aggregator": _imputation_cell,
    "predict": _prediction_cell, "ablate_end_to_end": _prediction_cell,
    "generalize": _generalization_cell,
}


def _run_cell(args) -> CellResult:
    spec, ds, rate, trial = args
    try:
        return _CELLS[spec.protocol](spec, ds, rate, trial)
    except (DataError, ConfigError, ExperimentError):
        raise
    except Exception as exc:  # attach the trial coordinates
        raise ExperimentError(f"{spec.protocol} trial {trial} at rate {rate:g} failed: "
                              f"{type(exc).__name__}: {exc}") from exc


# ---------------------------------------------------------------- drivers


def run_experiment(spec: ExperimentSpec, dataset: Optional[Dataset] = None) -> ExperimentReport:
    """Run every (rate, trial) cell of ``spec`` and assemble the report.

    Cells run in a process pool of ``spec.jobs`` workers; results are
    ordered by (rate, trial) so the report does not depend on scheduling.
    If ``spec.output_dir`` is set, report files and the checkpoint of the
    last trial's primary model are written there.
    """
    ds = dataset or load_dataset(spec.dataset, spec.label_column, spec.header, spec.schema_path)
    if spec.protocol in ("predict", "ablate_end_to_end") and spec.train_config.task == "imputation":
        spec = replace(spec, train_config=replace(spec.train_config, task="label_prediction"))
    rates = spec.missing_rates
    if 0.0 in rates and spec.protocol not in ("predict", "ablate_end_to_end"):
        warnings.warn("missing rate 0 leaves no unobserved cells; imputation MAE is reported as null",
                      RuntimeWarning, stacklevel=2)
    cells = [(spec, ds, rate, trial) for rate in rates for trial in range(spec.n_trials)]
    start = time.perf_counter()
    if spec.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows, traces, timing = [], {}, []
    for res in results:
        rows += res.rows
        traces.update(res.traces)
        timing += res.timing
    metadata = {"config_hash": spec.config_hash(), "commit": _commit_id(),
                "n_rows": ds.features.n, "n_features": ds.features.m}
    if spec.timing:
        metadata["wall_time"] = time.perf_counter() - start
    # where the report lives and how many workers built it do not belong in it
    stored = {k: v for k, v in spec.to_dict().items() if k not in ("output_dir", "jobs")}
    report = ExperimentReport(ds.name, spec.protocol, rows, _aggregate(rows), metadata,
                              stored, timing if spec.timing else None, traces)
    if spec.output_dir:
        report.write(spec.output_dir)
        final = results[-1].model
        if final is not None:
            save_checkpoint(Path(spec.output_dir) / "model_final.ckpt", *final)
    return report


def run_imputation_experiment(spec: ExperimentSpec, dataset: Optional[Dataset] = None) -> ExperimentReport:
    if spec.protocol != "impute":
        spec = replace(spec, protocol="impute")
    return run_experiment(spec, dataset)


def run_prediction_experiment(spec: ExperimentSpec, dataset: Optional[Dataset] = None) -> ExperimentReport:
    if spec.protocol != "predict":
        spec = replace(spec, protocol="predict")
    return run_experiment(spec, dataset)


def run_missing_sweep(spec: ExperimentSpec, dataset: Optional[Dataset] = None) -> ExperimentReport:
    """Imputation at every rate in ``spec.missing_rates`` (masks nested across rates per trial)."""
    if spec.protocol != "sweep":
        spec = replace(spec, protocol="sweep")
    return run_experiment(spec, dataset)


def run_generalization(spec: ExperimentSpec, dataset: Optional[Dataset] = None) -> ExperimentReport:
    if spec.protocol != "generalize":
        spec = replace(spec, protocol="generalize")
    return run_experiment(spec, dataset)


def run_ablations(spec: ExperimentSpec, dataset: Optional[Dataset] = None) -> ExperimentReport:
    if not spec.protocol.startswith("ablate_"):
        raise ConfigError(f"run_ablations needs an ablate_* protocol, got {spec.protocol!r}")
    return run_experiment(spec, dataset)


def paired_wins(report: ExperimentReport, better: str, worse: str, rate: Optional[float] = None,
                metric: str = "mae") -> int:
    """Trials where ``better`` scores no higher than ``worse`` (paired by trial and rate)."""
    a = {(r["rate"], r["trial"]): r["value"] for r in report.rows
         if r["method"] == better and r["metric"] == metric and (rate is None or r["rate"] == rate)}
    b = {(r["rate"], r["trial"]): r["value"] for r in report.rows
         if r["method"] == worse and r["metric"] == metric and (rate is None or r["rate"] == rate)}
    return sum(1 for k in a if k in b and a[k] is not None and b[k] is not None and a[k] <= b[k])


def is_monotone(values, max_inversions: int = 1, tol: float = 0.005) -> bool:
    """Non-decreasing sequence, allowing ``max_inversions`` drops of at most ``tol``."""
    drops = [values[i] - values[i + 1] for i in range(len(values) - 1) if values[i + 1] < values[i]]
    return len(drops) <= max_inversions and all(d <= tol for d in drops)
