"""Bipartite observation/feature graphs built from a data matrix and mask.

Node numbering used throughout: data (observation) node ``i`` has global
id ``i``; feature node ``j`` has global id ``n + j``. Each observed cell is
one undirected edge, stored once in row-major (i, j) order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .autodiff import Segments
from .dataset import ColumnSchema, DataError, DataMatrix, MaskMatrix
from .rng import make_rng


class EdgeRecord(NamedTuple):
    data_index: int
    feature_index: int
    feature_vector: tuple


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    n_data_nodes: int
    n_feature_nodes: int
    data_index: np.ndarray      # (E,) row of each edge
    feature_index: np.ndarray   # (E,) column of each edge
    edge_features: np.ndarray   # (E, edge_feature_width) initial edge attributes
    edge_values: np.ndarray     # (E,) scaled value or category code of each edge
    schema: tuple[ColumnSchema, ...]

    @property
    def n_edges(self) -> int:
        return int(self.data_index.size)

    @property
    def edge_feature_width(self) -> int:
        return int(self.edge_features.shape[1])

    @property
    def node_init_width(self) -> int:
        return self.n_feature_nodes

    @property
    def n_nodes(self) -> int:
        return self.n_data_nodes + self.n_feature_nodes

    @property
    def edges(self) -> list[EdgeRecord]:
        return [EdgeRecord(int(i), int(j), tuple(float(x) for x in f))
                for i, j, f in zip(self.data_index, self.feature_index, self.edge_features)]

    def data_degrees(self, kept: Optional[np.ndarray] = None) -> np.ndarray:
        idx = self.data_index if kept is None else self.data_index[kept]
        return np.bincount(idx, minlength=self.n_data_nodes)

    def feature_degrees(self, kept: Optional[np.ndarray] = None) -> np.ndarray:
        idx = self.feature_index if kept is None else self.feature_index[kept]
        return np.bincount(idx, minlength=self.n_feature_nodes)

    def to_matrix(self) -> np.ndarray:
        """n x m matrix holding edge values at observed cells and NaN elsewhere."""
        out = np.full((self.n_data_nodes, self.n_feature_nodes), np.nan)
        out[self.data_index, self.feature_index] = self.edge_values
        return out

    def to_json(self) -> str:
        return json.dumps({
            "n_data_nodes": self.n_data_nodes,
            "n_feature_nodes": self.n_feature_nodes,
            "edge_feature_width": self.edge_feature_width,
            "schema": [c.to_dict() for c in self.schema],
            "edges": [{"data": e.data_index, "feature": e.feature_index,
                       "features": list(e.feature_vector)} for e in self.edges],
        }, indent=1)

    @cached_property
    def full_layout(self) -> "MessageLayout":
        return MessageLayout.build(self, np.ones(self.n_edges, dtype=bool))


@dataclass(frozen=True)
class DropMask:
    kept: np.ndarray
    rate: float
    seed: int

    @classmethod
    def keep_all(cls, graph: BipartiteGraph) -> "DropMask":
        return cls(np.ones(graph.n_edges, dtype=bool), 0.0, 0)


def build_graph(data: DataMatrix, mask: MaskMatrix) -> BipartiteGraph:
    if mask.shape != data.shape:
        raise DataError(f"mask shape {mask.shape} does not match data shape {data.shape}")
    rows, cols = np.nonzero(mask.observed)  # row-major order
    values = data.values[rows, cols]
    width = max(c.width for c in data.schema)
    feats = np.zeros((rows.size, width))
    cat = np.array([c.is_categorical for c in data.schema])
    is_cat = cat[cols]
    feats[~is_cat, 0] = values[~is_cat]
    feats[np.flatnonzero(is_cat), values[is_cat].astype(np.int64)] = 1.0
    return BipartiteGraph(data.n, data.m, rows.astype(np.int64), cols.astype(np.int64),
                          feats, values.copy(), tuple(data.schema))


def init_node_features(graph: BipartiteGraph) -> tuple[np.ndarray, np.ndarray]:
    """Constant all-ones rows for data nodes, one-hot rows for feature nodes."""
    m = graph.n_feature_nodes
    return np.ones((graph.n_data_nodes, m)), np.eye(m)


def drop_edges(graph: BipartiteGraph, rate: float, seed: int) -> DropMask:
    """Keep each undirected edge iff its uniform(0, 1) draw exceeds ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"drop rate must lie in [0, 1], got {rate}")
    draws = make_rng(seed, "drop_edges").random(graph.n_edges)
    return DropMask(draws > rate, rate, seed)


def neighborhoods(graph: BipartiteGraph, drop: DropMask) -> list[list[tuple[int, int]]]:
    """Per global node id, the (neighbour id, edge id) pairs over kept edges."""
    if drop.kept.size != graph.n_edges:
        raise ValueError(f"drop mask has {drop.kept.size} entries for {graph.n_edges} edges")
    n = graph.n_data_nodes
    adj: list[list[tuple[int, int]]] = [[] for _ in range(graph.n_nodes)]
    for k in np.flatnonzero(drop.kept):
        i, j = int(graph.data_index[k]), int(graph.feature_index[k])
        adj[i].append((n + j, int(k)))
        adj[n + j].append((i, int(k)))
    return adj


@dataclass(frozen=True)
class MessageLayout:
    """Vectorised neighbourhood structure for one forward pass.

    The K kept undirected edges expand to 2K directed half-edges: the first
    K carry messages feature -> data, the last K data -> feature.
    """

    edge_ids: np.ndarray     # (K,) kept edge ids into the graph's edge list
    data_nodes: Segments     # (K,) global id of the data endpoint per kept edge
    feature_nodes: Segments  # (K,) global id of the feature endpoint per kept edge
    sources: Segments        # (2K,) sending node per half-edge
    targets: Segments        # (2K,) receiving node per half-edge
    half_edges: Segments     # (2K,) kept-edge row per half-edge

    @classmethod
    def build(cls, graph: BipartiteGraph, kept: np.ndarray) -> "MessageLayout":
        ids = np.flatnonzero(kept)
        n_nodes = graph.n_nodes
        d = graph.data_index[ids]
        f = graph.feature_index[ids] + graph.n_data_nodes
        k = ids.size
        return cls(
            edge_ids=ids,
            data_nodes=Segments(d, n_nodes),
            feature_nodes=Segments(f, n_nodes),
            sources=Segments(np.concatenate([f, d]), n_nodes),
            targets=Segments(np.concatenate([d, f]), n_nodes),
            half_edges=Segments(np.concatenate([np.arange(k), np.arange(k)]), k),
        )

    @property
    def n_kept(self) -> int:
        return int(self.edge_ids.size)
