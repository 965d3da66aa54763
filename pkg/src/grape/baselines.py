"""Reference imputers (column mean, KNN) and least-squares regression."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import DataError, DataMatrix, MaskMatrix

KNN_EPS = 1e-8
RIDGE_JITTER = 1e-8


@dataclass
class BaselineResult:
    imputed: np.ndarray
    method: str
    params: dict = field(default_factory=dict)


def _check(data: DataMatrix, mask: MaskMatrix) -> None:
    if mask.shape != data.shape:
        raise DataError(f"mask shape {mask.shape} does not match data shape {data.shape}")
    empty = np.flatnonzero(~mask.observed.any(axis=0))
    if empty.size:
        raise DataError(f"column(s) {empty.tolist()} have no observed entries")


def column_fill_values(data: DataMatrix, mask: MaskMatrix) -> np.ndarray:
    """Per-column fill value: observed mean, or observed mode (lowest code on ties) for categoricals.

    The mean is the correctly rounded sum over the count, so it does not
    depend on summation order.
    """
    _check(data, mask)
    fill = np.empty(data.m)
    for c in data.schema:
        obs = data.values[mask.observed[:, c.index], c.index]
        if c.is_categorical:
            counts = np.bincount(obs.astype(np.int64), minlength=c.cardinality)
            fill[c.index] = float(np.argmax(counts))
        else:
            fill[c.index] = math.fsum(obs) / obs.size
    return fill


def mean_impute(data: DataMatrix, mask: MaskMatrix) -> BaselineResult:
    fill = column_fill_values(data, mask)
    imputed = np.where(mask.observed, data.values, fill[None, :])
    return BaselineResult(imputed, "mean")


def knn_impute(data: DataMatrix, mask: MaskMatrix, k: int = 50, weights: str = "distance") -> BaselineResult:
    """Nearest-neighbour imputation over partially observed rows.

    Row distance uses the coordinates both rows observe, rescaled by
    m / (shared count). For a missing cell (i, j) the candidates are rows
    observing j and sharing at least one coordinate with i; the ``k``
    closest (ties broken by row index) are averaged with weights
    1 / (d + 1e-8), or uniformly. Cells without candidates get the column mean.
    """
    _check(data, mask)
    if data.n < 2:
        raise DataError("knn_impute needs at least 2 rows")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if weights not in ("distance", "uniform"):
        raise DataError(f"weights must be 'distance' or 'uniform', got {weights!r}")
    obs = mask.observed
    x = np.where(obs, data.values, 0.0)
    fill = column_fill_values(data, mask)
    imputed = np.where(obs, data.values, np.nan)
    m = data.m
    for i in np.flatnonzero(~obs.all(axis=1)):
        shared = obs & obs[i]
        n_shared = shared.sum(axis=1)
        sq = ((x - x[i]) ** 2 * shared).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.sqrt(sq * m / n_shared)
        usable = n_shared > 0
        usable[i] = False
        for j in np.flatnonzero(~obs[i]):
            cand = np.flatnonzero(usable & obs[:, j])
            if cand.size == 0:
                imputed[i, j] = fill[j]
                continue
            order = np.lexsort((cand, dist[cand]))[:k]
            nearest = cand[order]
            w = 1.0 / (dist[nearest] + KNN_EPS) if weights == "distance" else np.ones(nearest.size)
            imputed[i, j] = np.dot(w, data.values[nearest, j]) / w.sum()
    return BaselineResult(imputed, "knn", {"k": k, "weights": weights})


def fit_linear_regression(x_train: np.ndarray, y_train: np.ndarray) -> tuple[np.ndarray, float]:
    """Least squares with intercept via jittered normal equations.

    The 1e-8 ridge term keeps singular designs solvable; two refinement
    steps against the unjittered equations remove its bias when the design
    has full rank. Returns (coefficients, intercept).
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64).reshape(-1)
    if x_train.ndim != 2 or x_train.shape[0] != y_train.size:
        raise DataError(f"design {x_train.shape} does not match {y_train.size} targets")
    design = np.hstack([x_train, np.ones((x_train.shape[0], 1))])
    gram = design.T @ design
    rhs = design.T @ y_train
    jittered = gram + RIDGE_JITTER * np.eye(gram.shape[0])
    beta = np.linalg.solve(jittered, rhs)
    for _ in range(2):
        beta = beta + np.linalg.solve(jittered, rhs - gram @ beta)
    return beta[:-1], float(beta[-1])


def linear_regression_fit_predict(x_train, y_train, x_test) -> np.ndarray:
    coef, intercept = fit_linear_regression(x_train, y_train)
    return np.asarray(x_test, dtype=np.float64) @ coef + intercept


BASELINES = {
    "mean": mean_impute,
    "knn": knn_impute,
}


def run_baseline(name: str, data: DataMatrix, mask: MaskMatrix, **kwargs) -> BaselineResult:
    if name not in BASELINES:
        raise DataError(f"unknown baseline {name!r}; available: {', '.join(BASELINES)}")
    return BASELINES[name](data, mask, **kwargs)
