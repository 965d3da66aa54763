import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from grape import autodiff as ad
from grape.dataset import CATEGORICAL, ColumnSchema, DataMatrix, MaskMatrix, continuous_schema, sample_mask
from grape.graph import DropMask, build_graph, drop_edges
from grape.model import (ConfigError, GrapeConfig, GraphDims, ModelParams, decode_outputs, forward,
                         glorot_bound, impute_full, init_params, load_checkpoint, save_checkpoint,
                         all_cells)
from grape.training import imputation_loss

from oracles import central_diff, naive_forward, rel_error

GOLDEN = Path(__file__).parent / "golden"


def random_problem(n=5, m=4, rate=0.3, seed=0):
    rng = np.random.default_rng(seed)
    data = DataMatrix(rng.uniform(0, 1, size=(n, m)), continuous_schema(m))
    mask = sample_mask(n, m, rate, seed)
    return data, mask, build_graph(data, mask)


def randomize_biases(params, seed):
    rng = np.random.default_rng(seed)
    for k, t in params.tensors.items():
        if k.endswith(".bias"):
            t.data[...] = rng.uniform(-0.2, 0.2, size=t.shape)


def plain(params):
    return {k: t.data for k, t in params.tensors.items()}


# ---------------------------------------------------------------- config / init


def test_config_validation_and_roundtrip():
    cfg = GrapeConfig(n_layers=2, aggregator="max")
    assert GrapeConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        GrapeConfig(n_layers=0)
    with pytest.raises(ConfigError):
        GrapeConfig(aggregator="median")
    with pytest.raises(ConfigError):
        GrapeConfig.from_dict({"hidden": 3})


def test_glorot_bound_formula():
    assert glorot_bound(14, 64) == np.sqrt(6 / 78)


def test_init_params_bounds_and_determinism():
    _, _, g = random_problem()
    cfg = GrapeConfig(n_layers=2, hidden_dim=8, edge_head_hidden=6)
    dims = GraphDims.of(g, cfg)
    p1, p2 = init_params(cfg, dims, 3), init_params(cfg, dims, 3)
    assert p1.equal(p2)
    assert not p1.equal(init_params(cfg, dims, 4))
    assert p1["layer1.P.weight"].shape == (4 + 1, 8)
    assert p1["layer2.P.weight"].shape == (8 + 8, 8)
    assert p1["layer1.Q.weight"].shape == (4 + 8, 8)
    assert p1["layer1.W.weight"].shape == (1 + 16, 8)
    assert p1["layer2.W.weight"].shape == (8 + 16, 8)
    for name in p1.names():
        t = p1[name].data
        if name.endswith(".bias"):
            assert np.all(t == 0)
        else:
            a = glorot_bound(*t.shape)
            assert np.all(np.abs(t) < a)


# ---------------------------------------------------------------- golden / oracle


def test_forward_golden_1x1():
    gold = json.loads((GOLDEN / "forward_1x1.json").read_text())
    data = DataMatrix(np.array([[gold["value"]]]), continuous_schema(1))
    mask = MaskMatrix(np.ones((1, 1), dtype=bool))
    g = build_graph(data, mask)
    cfg = GrapeConfig(n_layers=1, hidden_dim=1, edge_head="linear")
    params = init_params(cfg, GraphDims.of(g, cfg), 0)
    for k, t in params.tensors.items():
        t.data[...] = 1.0 if k.endswith(".weight") else 0.0
    out = forward(params, g, None, [(0, 0)], cfg)
    assert out.node_embeddings.data[0, 0] == gold["h_data"]
    assert out.node_embeddings.data[1, 0] == gold["h_feature"]
    assert out.edge_embeddings.data[0, 0] == gold["edge_embedding"]
    assert out.edge_outputs.data[0, 0] == gold["prediction"]
    lit = forward(params, g, None, [(0, 0)], replace(cfg, message_source="literal_self_embedding"))
    assert lit.edge_outputs.data[0, 0] == gold["prediction"]


@pytest.mark.parametrize("aggregator", ["mean", "sum", "max"])
@pytest.mark.parametrize("source", ["neighbor_embedding", "literal_self_embedding"])
@pytest.mark.parametrize("head", ["mlp", "linear"])
def test_forward_matches_literal_oracle(aggregator, source, head):
    data, mask, g = random_problem(5, 4, 0.3, seed=11)
    cfg = GrapeConfig(n_layers=2, hidden_dim=6, edge_head_hidden=5, aggregator=aggregator,
                      message_source=source, edge_head=head)
    params = init_params(cfg, GraphDims.of(g, cfg), 5)
    randomize_biases(params, 6)
    drop = drop_edges(g, 0.3, 7)
    kept = [(int(i), int(j)) for i, j, k in zip(g.data_index, g.feature_index, drop.kept) if k]
    queries = [(i, j) for i in range(5) for j in range(4)]
    out = forward(params, g, drop, queries, cfg)
    h, preds = naive_forward(plain(params), data.values, mask.observed, kept, queries, 2, aggregator,
                             head, source == "literal_self_embedding")
    n = data.n
    for i in range(n):
        np.testing.assert_allclose(out.node_embeddings.data[i], h[("d", i)], rtol=1e-12, atol=1e-12)
    for j in range(4):
        np.testing.assert_allclose(out.node_embeddings.data[n + j], h[("f", j)], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.edge_outputs.data, preds, rtol=1e-12, atol=1e-12)


def test_literal_self_messages_ignore_neighbour_identity():
    # rows 0 and 1 see the same edge values, but on different feature nodes
    values = np.array([[0.4, 0.0, 0.0], [0.0, 0.4, 0.0], [0.1, 0.9, 0.3]])
    observed = np.array([[1, 0, 0], [0, 1, 0], [1, 1, 1]], dtype=bool)
    data = DataMatrix(values, continuous_schema(3))
    g = build_graph(data, MaskMatrix(observed))
    cfg = GrapeConfig(n_layers=1, hidden_dim=4, message_source="literal_self_embedding")
    params = init_params(cfg, GraphDims.of(g, cfg), 1)
    h = forward(params, g, None, None, cfg).node_embeddings.data
    assert np.array_equal(h[0], h[1])
    h2 = forward(params, g, None, None, replace(cfg, message_source="neighbor_embedding")).node_embeddings.data
    assert not np.array_equal(h2[0], h2[1])


def test_all_edges_dropped_is_finite():
    data, mask, g = random_problem()
    cfg = GrapeConfig(n_layers=2, hidden_dim=4)
    params = init_params(cfg, GraphDims.of(g, cfg), 0)
    drop = DropMask(np.zeros(g.n_edges, dtype=bool), 1.0, 0)
    out = forward(params, g, drop, [(0, 0), (4, 3)], cfg)
    assert np.all(np.isfinite(out.node_embeddings.data))
    assert np.all(np.isfinite(out.edge_outputs.data))
    # no messages: every data node sees the same constant input, so all agree
    h = out.node_embeddings.data
    assert np.all(h[:data.n] == h[0])


def test_full_graph_uses_every_edge():
    _, _, g = random_problem()
    cfg = GrapeConfig(n_layers=1, hidden_dim=3)
    params = init_params(cfg, GraphDims.of(g, cfg), 0)
    out = forward(params, g, None, None, cfg)
    k = out.layout.n_kept
    assert k == g.n_edges
    assert out.layout.targets.ids.size == 2 * g.n_edges
    targets = out.layout.targets.ids
    assert np.all(targets[:k] < g.n_data_nodes) and np.all(targets[k:] >= g.n_data_nodes)


def test_row_permutation_equivariance():
    data, mask, g = random_problem(6, 3, 0.3, seed=4)
    cfg = GrapeConfig(n_layers=2, hidden_dim=5, edge_head_hidden=4)
    params = init_params(cfg, GraphDims.of(g, cfg), 2)
    perm = np.random.default_rng(0).permutation(6)
    g2 = build_graph(data.take_rows(perm), mask.take_rows(perm))
    a = impute_full(params, g, cfg)
    b = impute_full(params, g2, cfg)
    np.testing.assert_allclose(b, a[perm], rtol=1e-12, atol=1e-13)


def test_bad_queries_and_dims():
    _, _, g = random_problem()
    cfg = GrapeConfig(n_layers=1, hidden_dim=3)
    params = init_params(cfg, GraphDims.of(g, cfg), 0)
    with pytest.raises(IndexError):
        forward(params, g, None, [(5, 0)], cfg)
    with pytest.raises(IndexError):
        forward(params, g, None, [(0, -1)], cfg)
    other = init_params(cfg, GraphDims(7, 1, (1,)), 0)
    with pytest.raises(ValueError):
        forward(other, g, None, None, cfg)


def test_non_finite_activation_reports_layer():
    _, _, g = random_problem()
    cfg = GrapeConfig(n_layers=2, hidden_dim=3)
    params = init_params(cfg, GraphDims.of(g, cfg), 0)
    params["layer2.Q.weight"].data[...] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="layer 2"):
        forward(params, g, None, None, cfg)


# ---------------------------------------------------------------- imputation output


def test_impute_full_overwrites_observed():
    data, _, _ = random_problem()
    mask = MaskMatrix(np.ones(data.shape, dtype=bool))
    g = build_graph(data, mask)
    cfg = GrapeConfig(n_layers=1, hidden_dim=3)
    params = init_params(cfg, GraphDims.of(g, cfg), 0)
    assert np.array_equal(impute_full(params, g, cfg), data.values)
    data, mask, g = random_problem()
    out = impute_full(params, g, cfg)
    assert np.array_equal(out[mask.observed], data.values[mask.observed])
    assert np.all(np.isfinite(out))


def test_decode_outputs_argmax_for_categorical():
    schema = [ColumnSchema(0), ColumnSchema(1, CATEGORICAL, 3)]
    dims = GraphDims(2, 3, (1, 3))
    outputs = np.array([[0.25, 0.1, 2.0, -1.0], [0.7, 0.0, 0.0, 5.0]])
    vals = decode_outputs(outputs, np.array([1, 0]), dims, schema)
    assert vals.tolist() == [1.0, 0.7]


# ---------------------------------------------------------------- end-to-end gradients


def _fd_check_model(cfg, data, mask, seed):
    g = build_graph(data, mask)
    params = init_params(cfg, GraphDims.of(g, cfg), seed)
    randomize_biases(params, seed + 1)
    drop = drop_edges(g, 0.3, seed)
    queries = (g.data_index, g.feature_index)

    def loss():
        return imputation_loss(forward(params, g, drop, queries, cfg, final_edge_update=False), g)

    params.zero_grad()
    loss().backward()
    worst = 0.0
    for name in params.names():
        t = params[name]
        num = central_diff(lambda: loss().item(), t.data)
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        worst = max(worst, rel_error(grad, num))
    return worst


@pytest.mark.parametrize("aggregator", ["mean", "sum", "max"])
def test_end_to_end_gradient_6x4(aggregator):
    rng = np.random.default_rng(21)
    data = DataMatrix(rng.uniform(0, 1, size=(6, 4)), continuous_schema(4))
    mask = sample_mask(6, 4, 0.3, 21)
    cfg = GrapeConfig(n_layers=2, hidden_dim=4, edge_head_hidden=3, aggregator=aggregator)
    assert _fd_check_model(cfg, data, mask, 3) <= 1e-5


def test_end_to_end_gradient_mixed_types():
    rng = np.random.default_rng(22)
    values = rng.uniform(0, 1, size=(6, 4))
    values[:, 2] = rng.integers(0, 3, size=6)
    schema = [ColumnSchema(0), ColumnSchema(1), ColumnSchema(2, CATEGORICAL, 3), ColumnSchema(3)]
    data = DataMatrix(values, schema)
    mask = sample_mask(6, 4, 0.25, 5)
    cfg = GrapeConfig(n_layers=2, hidden_dim=4, edge_head_hidden=3, output_mode="per_feature")
    assert _fd_check_model(cfg, data, mask, 4) <= 1e-5


def test_end_to_end_gradient_node_head():
    data, mask, g = random_problem(6, 4, 0.3, seed=8)
    cfg = GrapeConfig(n_layers=2, hidden_dim=4, edge_head="linear", node_head="linear")
    params = init_params(cfg, GraphDims.of(g, cfg), 9)
    randomize_biases(params, 10)
    y = np.random.default_rng(1).standard_normal(6)
    drop = drop_edges(g, 0.3, 2)

    def loss():
        out = forward(params, g, drop, None, cfg, final_edge_update=False)
        return ad.mse_loss(out.node_predictions, y)

    params.zero_grad()
    loss().backward()
    for name in params.names():
        t = params[name]
        num = central_diff(lambda: loss().item(), t.data)
        grad = np.zeros_like(t.data) if t.grad is None else t.grad  # unused last edge update
        assert rel_error(grad, num) <= 1e-5, name


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_and_rejection(tmp_path):
    _, _, g = random_problem()
    cfg = GrapeConfig(n_layers=2, hidden_dim=4)
    dims = GraphDims.of(g, cfg)
    params = init_params(cfg, dims, 0)
    path = tmp_path / "model_final.ckpt"
    save_checkpoint(path, cfg, dims, params)
    cfg2, dims2, params2 = load_checkpoint(path, dims)
    assert cfg2 == cfg and dims2 == dims and params2.equal(params)
    with pytest.raises(ValueError):
        load_checkpoint(path, GraphDims(5, 1, (1,)))
    doc = json.loads(path.read_text())
    doc["params"]["layer1.P.weight"]["shape"] = [3, 4]
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_all_cells_order():
    rows, cols = all_cells(2, 3)
    assert rows.tolist() == [0, 0, 0, 1, 1, 1] and cols.tolist() == [0, 1, 2, 0, 1, 2]
