import json
import warnings

import numpy as np
import pytest

import grape.experiments as ex
from grape.dataset import DataError, sample_mask
from grape.experiments import (ExperimentReport, ExperimentSpec, is_monotone, load_dataset, paired_wins,
                               preset_config, run_ablations, run_experiment, run_generalization,
                               run_imputation_experiment, run_missing_sweep, run_prediction_experiment)
from grape.model import ConfigError, GrapeConfig, load_checkpoint
from grape.training import TrainConfig

TINY = GrapeConfig(n_layers=2, hidden_dim=8, edge_head_hidden=8)
TINY_LABEL = GrapeConfig(n_layers=2, hidden_dim=8, edge_head="linear", node_head="linear")
DATA = "synthetic:n=30,m=5,rank=1,noise=0,seed=0"


def tiny(**kw):
    kw.setdefault("train_config", TrainConfig(epochs=20, eval_every=10, grape=TINY))
    kw.setdefault("n_trials", 2)
    return ExperimentSpec(DATA, **kw)


# ---------------------------------------------------------------- datasets and spec


def test_load_dataset_descriptors(tmp_path):
    ds = load_dataset("synthetic:n=12,m=3,rank=1,seed=4")
    assert ds.features.shape == (12, 3) and ds.labels.shape == (12,)
    np.testing.assert_allclose(ds.labels, ds.features.values.sum(axis=1), rtol=1e-12)
    sq = load_dataset("synthetic:n=12,m=3,rank=1,seed=4,labels=squares")
    np.testing.assert_allclose(sq.labels, (ds.features.values ** 2).sum(axis=1), rtol=1e-12)
    assert load_dataset("uci:housing").features.shape == (506, 13)
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
    ds = load_dataset(str(p), label_column="y", header=True)
    assert ds.features.shape == (3, 2) and ds.labels.tolist() == [3, 6, 9]
    with pytest.raises(ConfigError, match="bogus"):
        load_dataset("synthetic:n=5,bogus=1")
    with pytest.raises(DataError):
        load_dataset(str(p), label_column="z", header=True)


def test_spec_validation_and_hash():
    with pytest.raises(ConfigError):
        ExperimentSpec(DATA, n_trials=0)
    with pytest.raises(ConfigError, match="missing rate"):
        ExperimentSpec(DATA, missing_rates=(1.5,))
    with pytest.raises(ConfigError):
        ExperimentSpec(DATA, protocol="bogus")
    with pytest.raises(ConfigError):
        ExperimentSpec(DATA, baselines=("mice",))
    with pytest.raises(ConfigError):
        ExperimentSpec.from_dict({"dataset": DATA, "n_trial": 3})
    s = tiny()
    assert ExperimentSpec.from_dict(s.to_dict()) == s
    assert s.config_hash() == ExperimentSpec.from_dict(json.loads(json.dumps(s.to_dict()))).config_hash()
    assert s.config_hash() == tiny(output_dir="/x", jobs=3).config_hash()
    assert s.config_hash() != tiny(seed=1).config_hash()


def test_presets_change_epochs_only():
    full, desk = preset_config("full"), preset_config("desk")
    assert full.epochs == 20000 and desk.epochs == 4000
    assert full.grape == desk.grape == GrapeConfig()
    assert full.to_dict() | {"epochs": 0} == desk.to_dict() | {"epochs": 0}
    pred = preset_config("full", "label_prediction")
    assert pred.grape.n_layers == 2 and pred.grape.hidden_dim == 16 and pred.grape.edge_head == "linear"
    with pytest.raises(ConfigError):
        preset_config("huge")


# ---------------------------------------------------------------- imputation


def test_imputation_report_structure(tmp_path):
    spec = tiny(baselines=("mean", "knn"), output_dir=str(tmp_path))
    rep = run_imputation_experiment(spec)
    assert rep.methods() == ["grape", "mean", "knn"]
    assert len(rep.values("grape")) == 2 and len(rep.values("knn", metric="rmse")) == 2
    agg = rep.aggregate("grape")
    vals = rep.values("grape")
    assert agg["mean"] == pytest.approx(np.mean(vals), abs=1e-15) and agg["std"] == pytest.approx(np.std(vals), abs=1e-15)
    for name in ("report.json", "report.csv", "trace_0.csv", "trace_1.csv", "model_final.ckpt"):
        assert (tmp_path / name).exists(), name
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header == "dataset,method,rate,trial,metric,value"
    assert rep.metadata["config_hash"] == spec.config_hash() and "commit" in rep.metadata
    cfg, _, params = load_checkpoint(tmp_path / "model_final.ckpt")
    assert cfg == TINY and params.names()


def test_rate_zero_reports_null_with_warning():
    with pytest.warns(RuntimeWarning, match="rate 0"):
        rep = run_imputation_experiment(tiny(missing_rates=(0.0,), n_trials=1))
    assert rep.values("grape") == [None] and rep.values("mean") == [None]
    assert rep.aggregate("grape")["mean"] is None and rep.aggregate("grape")["n"] == 0


def test_report_roundtrip_and_tamper_check(tmp_path):
    rep = run_imputation_experiment(tiny(output_dir=str(tmp_path)))
    back = ExperimentReport.load(tmp_path / "report.json")
    assert back.rows == rep.rows and back.aggregates == rep.aggregates
    doc = json.loads((tmp_path / "report.json").read_text())
    doc["aggregates"][0]["mean"] += 1e-9
    (tmp_path / "report.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="does not match"):
        ExperimentReport.load(tmp_path / "report.json")


def test_reports_reproducible_and_jobs_invariant(tmp_path):
    a = run_imputation_experiment(tiny(output_dir=str(tmp_path / "a")))
    b = run_imputation_experiment(tiny(output_dir=str(tmp_path / "b"), jobs=2))
    assert a.rows == b.rows
    assert (tmp_path / "a/report.json").read_bytes() == (tmp_path / "b/report.json").read_bytes()
    assert (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()
    c = run_imputation_experiment(tiny(seed=9))
    assert c.rows != a.rows


def _record_inputs(monkeypatch):
    seen = []
    real_train, real_base = ex.train_imputation, ex.run_baseline

    def train(data, mask, cfg, *a, **kw):
        seen.append((data.values.copy(), mask.observed.copy(), cfg.seed))
        return real_train(data, mask, cfg, *a, **kw)

    def base(name, data, mask, *a, **kw):
        seen.append((data.values.copy(), mask.observed.copy(), None))
        return real_base(name, data, mask, *a, **kw)

    monkeypatch.setattr(ex, "train_imputation", train)
    monkeypatch.setattr(ex, "run_baseline", base)
    return seen


@pytest.mark.parametrize("protocol", ["ablate_dropout", "ablate_aggregator"])
def test_arms_share_masks_and_seeds(monkeypatch, protocol):
    seen = _record_inputs(monkeypatch)
    rep = run_ablations(tiny(protocol=protocol, n_trials=1, baselines=("mean", "knn")))
    assert len(seen) >= 4
    v0, m0, _ = seen[0]
    for v, m, _ in seen[1:]:
        assert np.array_equal(v, v0) and np.array_equal(m, m0)
    seeds = {s for _, _, s in seen if s is not None}
    assert len(seeds) == 1
    arms = [r for r in rep.methods() if r.startswith("grape")]
    assert len(arms) == (2 if protocol == "ablate_dropout" else 3)


def test_aggregator_arm_names():
    rep = run_ablations(tiny(protocol="ablate_aggregator", n_trials=1))
    assert rep.methods()[:3] == ["grape_sum", "grape_max", "grape_mean"]
    assert all(len(rep.values(a)) == 1 for a in rep.methods())
    with pytest.raises(ConfigError):
        run_ablations(tiny())


# ---------------------------------------------------------------- sweep


def test_sweep_groups_and_curve(tmp_path):
    rep = run_missing_sweep(tiny(missing_rates=(0.1, 0.3, 0.5, 0.7), n_trials=1, output_dir=str(tmp_path)))
    assert sorted({r["rate"] for r in rep.rows}) == [0.1, 0.3, 0.5, 0.7]
    curve = (tmp_path / "curve.csv").read_text().splitlines()
    assert curve[0] == "method,metric,rate,mean,std,n" and len(curve) == 1 + 4 * 2 * 2
    assert (tmp_path / "trace_0_grape_r0.5.csv").exists()


def test_single_rate_sweep_equals_imputation():
    a = run_missing_sweep(tiny())
    b = run_imputation_experiment(tiny())
    assert a.rows == b.rows


def test_sweep_masks_nested_across_rates():
    lo = sample_mask(40, 6, 0.1, 3).observed
    hi = sample_mask(40, 6, 0.5, 3).observed
    assert np.all(hi <= lo)


def test_mean_baseline_monotone_in_rate():
    spec = ExperimentSpec("synthetic:n=200,m=8,rank=1,noise=0,seed=1", protocol="sweep",
                          missing_rates=(0.1, 0.3, 0.5, 0.7), n_trials=5,
                          train_config=TrainConfig(epochs=1, grape=TINY))
    rep = run_missing_sweep(spec)
    means = [rep.aggregate("mean", r)["mean"] for r in spec.missing_rates]
    assert is_monotone(means, max_inversions=1, tol=0.005)


def test_is_monotone():
    assert is_monotone([0.1, 0.2, 0.3])
    assert is_monotone([0.1, 0.098, 0.3])
    assert not is_monotone([0.1, 0.09, 0.3])
    assert not is_monotone([0.3, 0.299, 0.298])


# ---------------------------------------------------------------- generalization


def test_generalization_rows():
    rep = run_generalization(tiny(protocol="generalize", n_trials=1))
    assert set(rep.methods()) == {"grape_train_graph", "grape_test_graph", "mean_train_graph", "mean_test_graph"}
    assert all(v is not None and np.isfinite(v) for v in (rep.values("grape_test_graph") + rep.values("mean_test_graph")))


def test_generalization_single_test_row():
    # 5 rows at train fraction 0.8 leave one row in the test graph
    spec = ExperimentSpec("synthetic:n=5,m=6,rank=1,seed=2", protocol="generalize", train_fraction=0.8,
                          n_trials=1, baselines=(), missing_rates=(0.5,),
                          train_config=TrainConfig(epochs=5, grape=TINY))
    rep = run_generalization(spec)
    v = rep.values("grape_test_graph")
    assert len(v) == 1


# ---------------------------------------------------------------- prediction


def test_prediction_compare_rows(tmp_path):
    spec = ExperimentSpec(DATA, protocol="predict", n_trials=2, compare=True, output_dir=str(tmp_path),
                          train_config=TrainConfig(epochs=20, eval_every=10, grape=TINY_LABEL))
    rep = run_prediction_experiment(spec)
    assert rep.methods() == ["grape", "grape_impute_then_predict", "mean+ols"]
    assert all(np.isfinite(v) for v in rep.values("grape_impute_then_predict"))
    assert paired_wins(rep, "grape", "grape", 0.3) == 2
    assert json.loads((tmp_path / "report.json").read_text())["spec"]["train_config"]["task"] == "label_prediction"


def test_end_to_end_ablation_arm_names():
    spec = ExperimentSpec(DATA, protocol="ablate_end_to_end", n_trials=1, baselines=(),
                          train_config=TrainConfig(epochs=5, grape=TINY_LABEL))
    rep = run_ablations(spec)
    assert rep.methods() == ["end_to_end", "impute_then_predict"]


def test_failed_trial_names_coordinates(monkeypatch):
    def boom(*a, **kw):
        raise FloatingPointError("nan loss")

    monkeypatch.setattr(ex, "train_imputation", boom)
    with pytest.raises(ex.ExperimentError, match="trial 0 at rate 0.3"):
        run_imputation_experiment(tiny())
