"""Missing-data imputation and label prediction with a bipartite-graph GNN."""
from .dataset import (ColumnSchema, DataError, DataMatrix, LabelVector, MaskMatrix, load_csv, load_uci,
                      make_synthetic, minmax_scale, sample_mask, split_labels)
from .graph import BipartiteGraph, DropMask, build_graph, drop_edges
from .model import ConfigError, GrapeConfig, ModelParams, forward, impute_full, init_params
from .training import TrainConfig, TrainTrace, impute_then_predict, train_imputation, train_label_prediction
from .baselines import knn_impute, mean_impute
from .metrics import compute_metrics
from .experiments import ExperimentReport, ExperimentSpec, run_experiment

__version__ = "0.1.0"
