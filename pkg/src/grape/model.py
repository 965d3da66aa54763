"""Bipartite message-passing network with edge embeddings.

Per layer: messages from incident kept edges are aggregated into each node,
node embeddings are updated from (own embedding, aggregate), then every
kept edge embedding is updated from (edge, data-node, feature-node)
embeddings. An edge head maps (data, feature) node-embedding pairs to cell
predictions; an optional node head maps an imputed row to a label.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .dataset import ColumnSchema
from .graph import BipartiteGraph, DropMask, MessageLayout, init_node_features
from .rng import make_rng

AGGREGATORS = ("mean", "sum", "max")
EDGE_HEADS = ("mlp", "linear")
NODE_HEADS = ("none", "linear")
MESSAGE_SOURCES = ("neighbor_embedding", "literal_self_embedding")
OUTPUT_MODES = ("continuous", "per_feature")
NODE_INPUTS = ("observed_and_predicted", "all_predicted")

CHECKPOINT_FORMAT = "grape-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


def _check_choice(name, value, options):
    if value not in options:
        raise ConfigError(f"{name} must be one of {options}, got {value!r}")


@dataclass(frozen=True)
class GrapeConfig:
    n_layers: int = 3
    hidden_dim: int = 64
    aggregator: str = "mean"
    edge_head: str = "mlp"
    edge_head_hidden: int = 64
    node_head: str = "none"
    message_source: str = "neighbor_embedding"
    output_mode: str = "continuous"
    node_input: str = "observed_and_predicted"
    bias: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.hidden_dim < 1 or self.edge_head_hidden < 1:
            raise ConfigError("hidden widths must be >= 1")
        _check_choice("aggregator", self.aggregator, AGGREGATORS)
        _check_choice("edge_head", self.edge_head, EDGE_HEADS)
        _check_choice("node_head", self.node_head, NODE_HEADS)
        _check_choice("message_source", self.message_source, MESSAGE_SOURCES)
        _check_choice("output_mode", self.output_mode, OUTPUT_MODES)
        _check_choice("node_input", self.node_input, NODE_INPUTS)
        if self.node_head != "none" and self.output_mode != "continuous":
            raise ConfigError("a node head needs output_mode='continuous'")

    @classmethod
    def from_dict(cls, d: dict) -> "GrapeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GraphDims:
    """Graph-dependent widths that fix parameter shapes."""

    n_features: int
    edge_feature_width: int
    output_widths: tuple[int, ...]

    @property
    def output_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.output_widths)[:-1]]).astype(np.int64)

    @property
    def output_width(self) -> int:
        return int(sum(self.output_widths))

    @classmethod
    def of(cls, graph: BipartiteGraph, config: GrapeConfig) -> "GraphDims":
        return cls.from_schema(graph.schema, graph.edge_feature_width, config)

    @classmethod
    def from_schema(cls, schema: Sequence[ColumnSchema], edge_width: int, config: GrapeConfig) -> "GraphDims":
        if config.output_mode == "continuous":
            widths = (1,)
        else:
            widths = tuple(c.width for c in schema)
        return cls(len(schema), edge_width, widths)

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "edge_feature_width": self.edge_feature_width,
                "output_widths": list(self.output_widths)}


class ModelParams:
    """Named trainable tensors, in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors.values()]

    def grads(self) -> list[Optional[np.ndarray]]:
        return [t.grad for t in self.tensors.values()]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()})

    def equal(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def _layer_shapes(config: GrapeConfig, dims: GraphDims) -> list[tuple[str, int, int]]:
    h = config.hidden_dim
    shapes = []
    node_w, edge_w = dims.n_features, dims.edge_feature_width
    for l in range(1, config.n_layers + 1):
        shapes.append((f"layer{l}.P", node_w + edge_w, h))
        shapes.append((f"layer{l}.Q", node_w + h, h))
        shapes.append((f"layer{l}.W", edge_w + 2 * h, h))
        node_w, edge_w = h, h
    if config.edge_head == "mlp":
        shapes.append(("edge_head.hidden", 2 * h, config.edge_head_hidden))
        shapes.append(("edge_head.out", config.edge_head_hidden, dims.output_width))
    else:
        shapes.append(("edge_head.out", 2 * h, dims.output_width))
    if config.node_head == "linear":
        shapes.append(("node_head.out", dims.n_features, 1))
    return shapes


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: GrapeConfig, dims: GraphDims, seed: int, dtype=np.float64) -> ModelParams:
    """Glorot-uniform weights, zero biases; one derived RNG stream per weight.

    Weights are always drawn in float64, then cast to ``dtype``.
    """
    tensors = {}
    for name, fan_in, fan_out in _layer_shapes(config, dims):
        a = glorot_bound(fan_in, fan_out)
        w = make_rng(seed, "init", name).uniform(-a, a, size=(fan_in, fan_out))
        tensors[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        if config.bias:
            tensors[f"{name}.bias"] = Tensor(np.zeros((1, fan_out), dtype=dtype), requires_grad=True)
    return ModelParams(tensors)


def _linear(params: ModelParams, name: str, x: Tensor) -> Tensor:
    y = ad.matmul(x, params[f"{name}.weight"])
    return _bias(params, name, y)


def _bias(params: ModelParams, name: str, y: Tensor) -> Tensor:
    bias = f"{name}.bias"
    return ad.add_bias(y, params[bias]) if bias in params else y


def _bias_of(params: ModelParams, name: str) -> Optional[Tensor]:
    return params.tensors.get(f"{name}.bias")


def _weight_blocks(params: ModelParams, name: str, widths: Sequence[int]) -> list[Tensor]:
    """Split a weight acting on Concat(x_1, ..., x_k) into its per-input row blocks."""
    w = params[f"{name}.weight"]
    bounds = np.cumsum([0, *widths])
    if bounds[-1] != w.shape[0]:
        raise ValueError(f"{name}: weight has {w.shape[0]} input rows, inputs total {bounds[-1]}")
    return [ad.slice_rows(w, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]


@dataclass
class ForwardOutput:
    node_embeddings: Tensor            # (n + m) x hidden; data nodes first
    edge_embeddings: Tensor            # K x hidden, rows follow layout.edge_ids
    edge_outputs: Optional[Tensor]     # Q x output_width head outputs per query
    query_rows: np.ndarray
    query_cols: np.ndarray
    node_predictions: Optional[Tensor]  # n x 1
    layout: MessageLayout
    dims: GraphDims

    def edge_predictions(self) -> Tensor:
        """Scalar prediction per query (continuous output slot of its feature)."""
        if self.dims.output_widths == (1,):
            return self.edge_outputs
        return ad.pick(self.edge_outputs, np.arange(self.query_rows.size),
                       self.dims.output_offsets[self.query_cols])


def _check_finite(t: Tensor, what: str, layer: int) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite {what} at layer {layer}")


def embed(params: ModelParams, graph: BipartiteGraph, layout: MessageLayout,
          config: GrapeConfig, final_edge_update: bool = True) -> tuple[Tensor, Tensor]:
    """Run the message-passing layers; return (node, edge) embeddings.

    With ``final_edge_update=False`` the returned edge embeddings are those
    entering the last layer.

    A weight applied to a concatenation is split into row blocks, so
    ``W . Concat(h_u, e_uv)`` is evaluated as ``(H W_h)[u] + E W_e``: the
    node-side products run once per node instead of once per half-edge.
    """
    data_init, feat_init = init_node_features(graph)
    h = Tensor(np.vstack([data_init, feat_init]).astype(params.dtype))
    e = Tensor(graph.edge_features[layout.edge_ids].astype(params.dtype))
    n_nodes = graph.n_nodes
    senders = layout.sources if config.message_source == "neighbor_embedding" else layout.targets
    hid = config.hidden_dim
    for l in range(1, config.n_layers + 1):
        node_w, edge_w = h.shape[1], e.shape[1]
        p_node, p_edge = _weight_blocks(params, f"layer{l}.P", [node_w, edge_w])
        messages = ad.relu_sum([ad.take_rows(ad.matmul(h, p_node), senders),
                                ad.take_rows(ad.matmul(e, p_edge), layout.half_edges)],
                               _bias_of(params, f"layer{l}.P"))
        agg = ad.segment_aggregate(messages, layout.targets, n_nodes, config.aggregator)

        q_self, q_agg = _weight_blocks(params, f"layer{l}.Q", [node_w, hid])
        h = ad.relu_sum([ad.matmul(h, q_self), ad.matmul(agg, q_agg)], _bias_of(params, f"layer{l}.Q"))
        _check_finite(h, "node embeddings", l)
        if l == config.n_layers and not final_edge_update:
            break  # no head reads the last edge embeddings

        w_edge, w_data, w_feat = _weight_blocks(params, f"layer{l}.W", [edge_w, hid, hid])
        e = ad.relu_sum([ad.matmul(e, w_edge),
                         ad.take_rows(ad.matmul(h, w_data), layout.data_nodes),
                         ad.take_rows(ad.matmul(h, w_feat), layout.feature_nodes)],
                        _bias_of(params, f"layer{l}.W"))
        _check_finite(e, "edge embeddings", l)
    return h, e


def edge_head(params: ModelParams, h: Tensor, rows: np.ndarray, cols: np.ndarray,
              n_data: int, config: GrapeConfig) -> Tensor:
    """Head applied to Concat(h_data, h_feature) for each queried cell."""
    first = "edge_head.hidden" if config.edge_head == "mlp" else "edge_head.out"
    w_data, w_feat = _weight_blocks(params, first, [h.shape[1], h.shape[1]])
    parts = [ad.take_rows(ad.matmul(h, w_data), Segments(rows, h.shape[0])),
             ad.take_rows(ad.matmul(h, w_feat), Segments(cols + n_data, h.shape[0]))]
    if config.edge_head == "mlp":
        return _linear(params, "edge_head.out", ad.relu_sum(parts, _bias_of(params, first)))
    return _bias(params, first, ad.add(*parts))


def _imputed_rows(params, h, graph: BipartiteGraph, config: GrapeConfig) -> Tensor:
    """n x m matrix: true values at observed cells, head predictions elsewhere."""
    n, m = graph.n_data_nodes, graph.n_feature_nodes
    base = np.zeros((n, m), dtype=params.dtype)
    if config.node_input == "all_predicted":
        rows, cols = np.divmod(np.arange(n * m), m)
    else:
        base[graph.data_index, graph.feature_index] = graph.edge_values
        observed = np.zeros((n, m), dtype=bool)
        observed[graph.data_index, graph.feature_index] = True
        rows, cols = np.nonzero(~observed)
    if rows.size == 0:
        return Tensor(base)
    preds = edge_head(params, h, rows, cols, n, config)
    return ad.scatter_elements(preds, rows, cols, base)


def forward(params: ModelParams, graph: BipartiteGraph, drop: Optional[DropMask],
            query_edges, config: GrapeConfig, final_edge_update: bool = True) -> ForwardOutput:
    """Full forward pass.

    ``drop=None`` feeds the full graph. ``query_edges`` is an (rows, cols)
    pair or a sequence of (i, j) tuples; queried cells need not be observed.
    """
    dims = GraphDims.of(graph, config)
    if drop is None or drop.kept.all():
        layout = graph.full_layout
    else:
        if drop.kept.size != graph.n_edges:
            raise ValueError(f"drop mask has {drop.kept.size} entries for {graph.n_edges} edges")
        layout = MessageLayout.build(graph, drop.kept)
    expected = config.hidden_dim
    first = params["layer1.P.weight"].shape[0]
    if first != graph.node_init_width + graph.edge_feature_width or params["layer1.P.weight"].shape[1] != expected:
        raise ValueError("parameters do not match graph dimensions")
    rows, cols = _query_arrays(query_edges)
    if rows.size and (rows.max() >= graph.n_data_nodes or cols.max() >= graph.n_feature_nodes
                      or rows.min() < 0 or cols.min() < 0):
        raise IndexError("query edge references a node outside the graph")
    h, e = embed(params, graph, layout, config, final_edge_update)
    outputs = edge_head(params, h, rows, cols, graph.n_data_nodes, config) if rows.size else None
    node_pred = None
    if config.node_head == "linear":
        node_pred = _linear(params, "node_head.out", _imputed_rows(params, h, graph, config))
    return ForwardOutput(h, e, outputs, rows, cols, node_pred, layout, dims)


def _query_arrays(query_edges) -> tuple[np.ndarray, np.ndarray]:
    if query_edges is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if isinstance(query_edges, tuple) and len(query_edges) == 2 and isinstance(query_edges[0], np.ndarray):
        return np.asarray(query_edges[0], dtype=np.int64), np.asarray(query_edges[1], dtype=np.int64)
    arr = np.asarray(list(query_edges), dtype=np.int64).reshape(-1, 2)
    return arr[:, 0].copy(), arr[:, 1].copy()


def all_cells(n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.divmod(np.arange(n * m, dtype=np.int64), m)
    return rows, cols


def decode_outputs(outputs: np.ndarray, cols: np.ndarray, dims: GraphDims,
                   schema: Sequence[ColumnSchema]) -> np.ndarray:
    """Per-query cell value: continuous slot, or argmax code for categorical features."""
    if dims.output_widths == (1,):
        return outputs[:, 0].copy()
    offsets = dims.output_offsets
    values = outputs[np.arange(cols.size), offsets[cols]].copy()
    for c in schema:
        if c.is_categorical:
            sel = np.flatnonzero(cols == c.index)
            if sel.size:
                lo = offsets[c.index]
                values[sel] = np.argmax(outputs[sel, lo:lo + c.cardinality], axis=1)
    return values


def impute_full(params: ModelParams, graph: BipartiteGraph, config: GrapeConfig) -> np.ndarray:
    """Imputed n x m matrix from a full-graph forward; observed cells keep true values."""
    n, m = graph.n_data_nodes, graph.n_feature_nodes
    rows, cols = all_cells(n, m)
    out = forward(params, graph, None, (rows, cols), config)
    values = decode_outputs(out.edge_outputs.data, cols, out.dims, graph.schema)
    imputed = values.reshape(n, m)
    imputed[graph.data_index, graph.feature_index] = graph.edge_values
    return imputed


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: Union[str, Path], config: GrapeConfig, dims: GraphDims,
                    params: ModelParams) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "dims": dims.to_dict(),
        "params": {k: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                   for k, t in params.tensors.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: Union[str, Path], expected_dims: Optional[GraphDims] = None
                    ) -> tuple[GrapeConfig, GraphDims, ModelParams]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    config = GrapeConfig.from_dict(doc["config"])
    d = doc["dims"]
    dims = GraphDims(int(d["n_features"]), int(d["edge_feature_width"]), tuple(d["output_widths"]))
    if expected_dims is not None and dims != expected_dims:
        raise ValueError(f"{path}: checkpoint dims {dims} do not match expected {expected_dims}")
    shapes = {f"{name}.weight": (fi, fo) for name, fi, fo in _layer_shapes(config, dims)}
    tensors = {}
    for k, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        if k.endswith(".weight") and shapes.get(k) != shape:
            raise ValueError(f"{path}: parameter {k} has shape {shape}, expected {shapes.get(k)}")
        tensors[k] = Tensor(np.asarray(entry["values"], dtype=np.float64).reshape(shape), requires_grad=True)
    if set(shapes) - set(tensors):
        raise ValueError(f"{path}: missing parameters {sorted(set(shapes) - set(tensors))}")
    return config, dims, ModelParams(tensors)
