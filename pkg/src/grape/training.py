"""Full-batch training loops for imputation and label prediction."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .baselines import linear_regression_fit_predict
from .dataset import DataMatrix, LabelVector, MaskMatrix
from .graph import BipartiteGraph, build_graph, drop_edges
from .metrics import compute_metrics
from .model import (ConfigError, GrapeConfig, GraphDims, ModelParams, forward, impute_full,
                    init_params)
from .rng import derive_seed

log = logging.getLogger(__name__)

TASKS = ("imputation", "label_prediction", "joint")
PRECISIONS = {"float64": np.float64, "float32": np.float32}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20000
    learning_rate: float = 0.001
    edge_dropout: float = 0.3
    task: str = "imputation"
    joint_weight: float = 0.0
    seed: int = 0
    eval_every: int = 500
    clip_norm: float = 10.0
    precision: str = "float64"
    grape: GrapeConfig = field(default_factory=GrapeConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.edge_dropout < 1.0:
            raise ConfigError(f"edge_dropout must lie in [0, 1), got {self.edge_dropout}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config key(s): {', '.join(sorted(unknown))}")
        if isinstance(d.get("grape"), dict):
            d["grape"] = GrapeConfig.from_dict(d["grape"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grape"] = self.grape.to_dict()
        return d


@dataclass
class TracePoint:
    epoch: int
    train_loss: float
    test_metric: Optional[float]


@dataclass
class TrainTrace:
    points: list[TracePoint] = field(default_factory=list)
    wall_time: float = 0.0
    clipped_steps: int = 0
    losses: list[float] = field(default_factory=list, repr=False)  # every epoch

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_metric"])
            for p in self.points:
                w.writerow([p.epoch, repr(p.train_loss), "" if p.test_metric is None else repr(p.test_metric)])

    @property
    def final_metric(self) -> Optional[float]:
        return self.points[-1].test_metric if self.points else None

    def rows(self) -> list[dict]:
        return [asdict(p) for p in self.points]


Progress = Optional[Callable[[dict], None]]


# ---------------------------------------------------------------- losses


def imputation_loss(out, graph: BipartiteGraph) -> ad.Tensor:
    """MSE over continuous observed cells plus cross-entropy over categorical ones.

    ``out`` must be a forward output whose queries are all observed edges in
    graph order. In continuous output mode every column is regressed.
    """
    dims = out.dims
    if dims.output_widths == (1,):
        return ad.mse_loss(out.edge_outputs, graph.edge_values)
    offsets = dims.output_offsets
    cols = graph.feature_index
    cat_cols = {c.index: c for c in graph.schema if c.is_categorical}
    is_cat = np.isin(cols, list(cat_cols))
    terms = []
    cont = np.flatnonzero(~is_cat)
    if cont.size:
        pred = ad.pick(out.edge_outputs, cont, offsets[cols[cont]])
        terms.append(ad.mse_loss(pred, graph.edge_values[cont]))
    n_cat = int(is_cat.sum())
    for j, c in cat_cols.items():
        sel = np.flatnonzero(cols == j)
        if sel.size == 0:
            continue
        logits = ad.take_cols(ad.take_rows(out.edge_outputs, sel), offsets[j], offsets[j] + c.cardinality)
        ce = ad.softmax_cross_entropy(logits, graph.edge_values[sel].astype(np.int64))
        terms.append(ad.scale(ce, sel.size / n_cat))
    return ad.add(*terms) if len(terms) > 1 else terms[0]


def _observed_queries(graph: BipartiteGraph):
    return graph.data_index, graph.feature_index


def _unobserved(mask: MaskMatrix) -> np.ndarray:
    return ~mask.observed


def _eval_imputation(params, graph, data: DataMatrix, mask: MaskMatrix, cfg: GrapeConfig) -> Optional[float]:
    region = _unobserved(mask)
    if not region.any():
        return None
    imputed = impute_full(params, graph, cfg)
    return compute_metrics(imputed, data.values, region, "mae")


def _forward(params, graph, drop, queries, cfg, epoch):
    try:
        return forward(params, graph, drop, queries, cfg, final_edge_update=False)
    except FloatingPointError as exc:
        raise TrainingError(f"epoch {epoch}: {exc}") from exc


def _step(params: ModelParams, loss: ad.Tensor, state: ad.AdamState, config: TrainConfig,
          trace: TrainTrace, epoch: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite training loss at epoch {epoch}")
    trace.losses.append(value)
    params.zero_grad()
    loss.backward()
    grads = params.grads()
    norm = ad.clip_grad_norm(grads, config.clip_norm)
    if norm > config.clip_norm:
        trace.clipped_steps += 1
        log.debug("epoch %d: gradient norm %.3g clipped to %.3g", epoch, norm, config.clip_norm)
    ad.adam_step(params.arrays(), grads, state)
    return value


def _dropout(graph: BipartiteGraph, config: TrainConfig, epoch: int):
    if config.edge_dropout == 0.0:
        return None
    return drop_edges(graph, config.edge_dropout, derive_seed(config.seed, "dropout", epoch))


def _is_eval_epoch(epoch: int, config: TrainConfig) -> bool:
    return (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs


# ---------------------------------------------------------------- loops


def train_imputation(data: DataMatrix, mask: MaskMatrix, config: TrainConfig,
                     progress: Progress = None, graph: Optional[BipartiteGraph] = None
                     ) -> tuple[ModelParams, TrainTrace]:
    """Train on observed cells; evaluate MAE on unobserved cells of ``data``.

    ``data`` must be scaled and still hold ground truth at unobserved cells
    (used only for evaluation).
    """
    cfg = config.grape
    if cfg.node_head != "none":
        cfg = replace(cfg, node_head="none")
    graph = graph or build_graph(data, mask)
    params = init_params(cfg, GraphDims.of(graph, cfg), derive_seed(config.seed, "init"), config.dtype)
    state = ad.AdamState(lr=config.learning_rate)
    trace = TrainTrace()
    queries = _observed_queries(graph)
    start = time.perf_counter()
    for epoch in range(config.epochs):
        out = _forward(params, graph, _dropout(graph, config, epoch), queries, cfg, epoch)
        loss = _step(params, imputation_loss(out, graph), state, config, trace, epoch)
        if _is_eval_epoch(epoch, config):
            metric = _eval_imputation(params, graph, data, mask, cfg)
            trace.points.append(TracePoint(epoch + 1, loss, metric))
            if progress:
                progress({"epoch": epoch + 1, "train_loss": loss, "test_mae": metric})
    trace.wall_time = time.perf_counter() - start
    return params, trace


def label_config(config: TrainConfig) -> GrapeConfig:
    cfg = config.grape
    return cfg if cfg.node_head == "linear" else replace(cfg, node_head="linear")


def predict_labels(params: ModelParams, graph: BipartiteGraph, cfg: GrapeConfig) -> np.ndarray:
    return forward(params, graph, None, None, cfg).node_predictions.data[:, 0].astype(np.float64)


def train_label_prediction(data: DataMatrix, mask: MaskMatrix, labels: LabelVector,
                           config: TrainConfig, progress: Progress = None,
                           graph: Optional[BipartiteGraph] = None) -> tuple[ModelParams, TrainTrace]:
    """Train the node head on train labels; evaluate MAE on test labels.

    In ``joint`` task mode the imputation loss is added with weight
    ``config.joint_weight``.
    """
    cfg = label_config(config)
    graph = graph or build_graph(data, mask)
    params = init_params(cfg, GraphDims.of(graph, cfg), derive_seed(config.seed, "init"), config.dtype)
    state = ad.AdamState(lr=config.learning_rate)
    trace = TrainTrace()
    train_idx, test_idx = labels.train_index, labels.test_index
    y_train = labels.labels[train_idx]
    joint = config.task == "joint" and config.joint_weight > 0
    queries = _observed_queries(graph) if joint else None
    start = time.perf_counter()
    for epoch in range(config.epochs):
        out = _forward(params, graph, _dropout(graph, config, epoch), queries, cfg, epoch)
        loss = ad.mse_loss(ad.take_rows(out.node_predictions, train_idx), y_train)
        if joint:
            loss = ad.add(loss, ad.scale(imputation_loss(out, graph), config.joint_weight))
        value = _step(params, loss, state, config, trace, epoch)
        if _is_eval_epoch(epoch, config):
            pred = predict_labels(params, graph, cfg)
            metric = compute_metrics(pred[test_idx], labels.labels[test_idx])
            trace.points.append(TracePoint(epoch + 1, value, metric))
            if progress:
                progress({"epoch": epoch + 1, "train_loss": value, "test_mae": metric})
    trace.wall_time = time.perf_counter() - start
    return params, trace


@dataclass
class TwoStageResult:
    test_mae: float
    imputed: np.ndarray
    predictions: np.ndarray
    trace: TrainTrace


def impute_then_predict(data: DataMatrix, mask: MaskMatrix, labels: LabelVector,
                        config: TrainConfig, progress: Progress = None) -> TwoStageResult:
    """Stage 1: train imputation with the same network; stage 2: OLS on the imputed rows."""
    cfg = replace(config.grape, node_head="none")
    stage1 = replace(config, task="imputation", grape=cfg)
    graph = build_graph(data, mask)
    params, trace = train_imputation(data, mask, stage1, progress, graph=graph)
    imputed = impute_full(params, graph, cfg)
    train_idx, test_idx = labels.train_index, labels.test_index
    pred = linear_regression_fit_predict(imputed[train_idx], labels.labels[train_idx], imputed)
    mae = compute_metrics(pred[test_idx], labels.labels[test_idx])
    return TwoStageResult(mae, imputed, pred, trace)
