from __future__ import annotations

from typing import Optional

import numpy as np


def compute_metrics(pred, truth, region=None, kind: str = "mae",
                    baseline_mae: Optional[float] = None) -> float:
    """MAE, RMSE or baseline-normalised MAE of ``pred`` vs ``truth`` over ``region``.

    ``region`` is a boolean mask (or index) selecting the evaluated entries;
    ``None`` means every entry.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth {truth.shape}")
    if region is not None:
        pred, truth = pred[region], truth[region]
    if pred.size == 0:
        raise ValueError("empty evaluation region")
    err = pred - truth
    if kind == "mae":
        return float(np.mean(np.abs(err)))
    if kind == "rmse":
        return float(np.sqrt(np.mean(err * err)))
    if kind == "normalized_mae":
        if baseline_mae is None or baseline_mae <= 0:
            raise ValueError("normalized_mae needs a positive baseline MAE")
        return float(np.mean(np.abs(err))) / baseline_mae
    raise ValueError(f"unknown metric {kind!r}")
