"""Tabular data containers, CSV ingestion, scaling, masks and label splits."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .rng import derive_seed, make_rng

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
MAX_INFERRED_LEVELS = 20
MASK_RETRIES = 100

UCI_DATASETS = ("housing", "concrete")


class DataError(ValueError):
    """Raised for malformed input data or impossible sampling requests."""


@dataclass(frozen=True)
class ColumnSchema:
    index: int
    kind: str = CONTINUOUS
    cardinality: Optional[int] = None
    name: str = ""
    # original values behind codes 0..cardinality-1 (only for recoded columns)
    levels: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise DataError(f"column {self.index}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and (self.cardinality is None or self.cardinality < 2):
            raise DataError(f"column {self.index}: categorical cardinality must be >= 2")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def width(self) -> int:
        """Number of slots this column occupies in a one-hot / logit encoding."""
        return self.cardinality if self.is_categorical else 1

    def to_dict(self) -> dict:
        d = {"index": self.index, "kind": self.kind, "name": self.name}
        if self.is_categorical:
            d["cardinality"] = self.cardinality
        if self.levels is not None:
            d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSchema":
        unknown = set(d) - {"index", "kind", "cardinality", "name", "levels"}
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        levels = d.get("levels")
        return cls(
            index=int(d["index"]),
            kind=d.get("kind", CONTINUOUS),
            cardinality=d.get("cardinality"),
            name=d.get("name", ""),
            levels=tuple(levels) if levels is not None else None,
        )


def continuous_schema(m: int, names: Optional[Sequence[str]] = None) -> list[ColumnSchema]:
    names = list(names) if names is not None else [f"x{j}" for j in range(m)]
    return [ColumnSchema(j, CONTINUOUS, None, names[j]) for j in range(m)]


def _check_schema(schema: Sequence[ColumnSchema], m: int) -> None:
    if sorted(c.index for c in schema) != list(range(m)):
        raise DataError(f"schema indices must cover 0..{m - 1} exactly once")


@dataclass
class DataMatrix:
    """An n x m table. Categorical columns hold integer codes stored as floats.

    ``scaler`` maps a continuous column index to the (min, max) used by
    :func:`minmax_scale`; it is ``None`` for unscaled data.
    """

    values: np.ndarray
    schema: list[ColumnSchema]
    scaler: Optional[dict[int, tuple[float, float]]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"data must be a non-empty 2-D matrix, got shape {self.values.shape}")
        self.schema = sorted(self.schema, key=lambda c: c.index)
        _check_schema(self.schema, self.values.shape[1])

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema]

    @property
    def categorical_columns(self) -> list[int]:
        return [c.index for c in self.schema if c.is_categorical]

    def take_rows(self, rows) -> "DataMatrix":
        return replace(self, values=self.values[np.asarray(rows)].copy())


@dataclass
class MaskMatrix:
    observed: np.ndarray
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.observed.shape

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def take_rows(self, rows) -> "MaskMatrix":
        return replace(self, observed=self.observed[np.asarray(rows)].copy())


@dataclass
class LabelVector:
    labels: np.ndarray
    partition: np.ndarray  # True = train
    train_fraction: float = 0.7

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.partition = np.asarray(self.partition, dtype=bool)

    @property
    def train_index(self) -> np.ndarray:
        return np.flatnonzero(self.partition)

    @property
    def test_index(self) -> np.ndarray:
        return np.flatnonzero(~self.partition)


# ---------------------------------------------------------------- CSV I/O


def _parse_float(text: str, row: int, col: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col}: non-numeric cell {text!r}") from None


def infer_schema(values: np.ndarray, names: Sequence[str]) -> tuple[list[ColumnSchema], np.ndarray]:
    """Type columns: integer-valued with at most 20 distinct values -> categorical.

    Categorical columns whose values are not already ``0..k-1`` are recoded;
    the original values are kept in ``ColumnSchema.levels``.
    """
    values = values.copy()
    schema = []
    for j in range(values.shape[1]):
        col = values[:, j]
        distinct = np.unique(col)
        if np.all(col == np.round(col)) and 2 <= distinct.size <= MAX_INFERRED_LEVELS:
            levels = None
            if not np.array_equal(distinct, np.arange(distinct.size)):
                levels = tuple(float(v) for v in distinct)
                values[:, j] = np.searchsorted(distinct, col)
            schema.append(ColumnSchema(j, CATEGORICAL, int(distinct.size), names[j], levels))
        else:
            schema.append(ColumnSchema(j, CONTINUOUS, None, names[j]))
    return schema, values


def load_schema(path: Union[str, Path]) -> list[ColumnSchema]:
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise DataError("schema sidecar must be a JSON array")
    return [ColumnSchema.from_dict(e) for e in entries]


def load_csv(
    path: Union[str, Path],
    schema: Union[str, Sequence[ColumnSchema]] = "infer",
    header: bool = False,
) -> DataMatrix:
    """Read a rectangular numeric CSV into an unscaled :class:`DataMatrix`.

    Row indices in error messages count data rows from 0 (a header row is
    not counted).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    names = None
    if header and rows:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: empty file")
    width = len(rows[0]) if names is None else len(names)
    parsed = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            parsed[i, j] = _parse_float(cell.strip(), i, j)
    names = names or [f"x{j}" for j in range(width)]
    if isinstance(schema, str):
        if schema != "infer":
            raise DataError(f"schema must be 'infer' or a list of ColumnSchema, got {schema!r}")
        schema, parsed = infer_schema(parsed, names)
    else:
        schema = list(schema)
        _check_schema(schema, width)
        for c in schema:
            if c.is_categorical:
                col = parsed[:, c.index]
                if np.any(col != np.round(col)) or col.min() < 0 or col.max() >= c.cardinality:
                    raise DataError(f"column {c.index}: categorical codes must be integers in [0, {c.cardinality})")
    return DataMatrix(parsed, list(schema))


def write_csv(data: DataMatrix, path: Union[str, Path], header: bool = False, values=None) -> None:
    values = data.values if values is None else np.asarray(values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(data.names)
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def load_uci(name: str) -> tuple[DataMatrix, np.ndarray]:
    """Load a bundled UCI regression dataset as (features, target).

    All feature columns are typed continuous, matching the MinMax-scaled
    treatment used for the reproduction runs.
    """
    if name not in UCI_DATASETS:
        raise DataError(f"unknown bundled dataset {name!r}; available: {', '.join(UCI_DATASETS)}")
    ref = resources.files("grape") / "data" / f"{name}.csv"
    with resources.as_file(ref) as p:
        raw = load_csv(p, schema="infer", header=True)
    names = raw.names
    values = raw.values
    # undo inference recoding: reproduction treats every column as continuous
    for c in raw.schema:
        if c.levels is not None:
            values[:, c.index] = np.asarray(c.levels)[values[:, c.index].astype(int)]
    features = DataMatrix(values[:, :-1], continuous_schema(values.shape[1] - 1, names[:-1]))
    return features, values[:, -1].copy()


def split_label_column(data: DataMatrix, column: int) -> tuple[DataMatrix, np.ndarray]:
    """Remove ``column`` from ``data`` and return it as the label vector.

    A column recoded to category codes on load is mapped back to its
    original values so labels stay on their own scale.
    """
    if not 0 <= column < data.m:
        raise DataError(f"label column {column} out of range for {data.m} columns")
    if data.m < 2:
        raise DataError("need at least one feature column besides the label")
    keep = [j for j in range(data.m) if j != column]
    schema = [replace(data.schema[j], index=k) for k, j in enumerate(keep)]
    labels = data.values[:, column].copy()
    levels = data.schema[column].levels
    if levels is not None:
        labels = np.asarray(levels, dtype=float)[labels.astype(int)]
    return DataMatrix(data.values[:, keep], schema), labels


# ---------------------------------------------------------------- scaling


def fit_scaler(data: DataMatrix, mask: MaskMatrix) -> dict[int, tuple[float, float]]:
    if mask.shape != data.shape:
        raise DataError(f"mask shape {mask.shape} does not match data shape {data.shape}")
    scaler = {}
    for c in data.schema:
        if c.is_categorical:
            continue
        obs = data.values[mask.observed[:, c.index], c.index]
        if obs.size == 0:
            raise DataError(f"column {c.index} has no observed entries; cannot fit scaler")
        scaler[c.index] = (float(obs.min()), float(obs.max()))
    return scaler


def apply_scaler(data: DataMatrix, scaler: dict[int, tuple[float, float]]) -> DataMatrix:
    values = data.values.copy()
    for j, (lo, hi) in scaler.items():
        span = hi - lo
        if span > 0:
            values[:, j] = (values[:, j] - lo) / span
        else:
            values[:, j] = 0.0
    return replace(data, values=values, scaler=dict(scaler))


def minmax_scale(data: DataMatrix, mask: MaskMatrix) -> DataMatrix:
    """Scale continuous columns to [0, 1] using observed-entry min/max.

    Unobserved cells are transformed with the same affine map (they may fall
    outside [0, 1]); they are kept only for evaluation bookkeeping.
    """
    return apply_scaler(data, fit_scaler(data, mask))


def inverse_scale(data: DataMatrix, column: int, value: float) -> float:
    if not data.scaler or column not in data.scaler:
        raise DataError(f"column {column} is not scaled")
    lo, hi = data.scaler[column]
    return value * (hi - lo) + lo


# ---------------------------------------------------------------- masks / splits


def sample_mask(n: int, m: int, missing_rate: float, seed: int) -> MaskMatrix:
    """MCAR mask: each cell unobserved independently with prob. ``missing_rate``.

    Masks leaving a column fully unobserved are redrawn from a derived
    stream, up to ``MASK_RETRIES`` times.
    """
    if not 0.0 <= missing_rate < 1.0:
        raise DataError(f"missing_rate must lie in [0, 1), got {missing_rate}")
    for attempt in range(MASK_RETRIES):
        rng = make_rng(seed, "mask", attempt)
        observed = rng.random((n, m)) >= missing_rate
        if observed.any(axis=0).all():
            return MaskMatrix(observed, missing_rate, seed)
    raise DataError(
        f"could not draw a mask with every column observed after {MASK_RETRIES} tries "
        f"(n={n}, m={m}, missing_rate={missing_rate}); rate too high for this shape"
    )


def split_labels(labels, train_fraction: float, seed: int) -> LabelVector:
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[0]
    if n < 2:
        raise DataError("need at least 2 labels to split")
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = math.floor(train_fraction * n)
    n_train = min(max(n_train, 1), n - 1)
    chosen = make_rng(seed, "split").permutation(n)[:n_train]
    partition = np.zeros(n, dtype=bool)
    partition[chosen] = True
    return LabelVector(labels, partition, train_fraction)


def split_rows(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train_rows, test_rows) index arrays for a random row split."""
    part = split_labels(np.zeros(n), train_fraction, derive_seed(seed, "rows")).partition
    return np.flatnonzero(part), np.flatnonzero(~part)


def make_synthetic(n: int, m: int, rank: int, noise: float, seed: int) -> tuple[DataMatrix, np.ndarray]:
    """Low-rank Gaussian matrix ``A @ B + noise * eps``; labels are clean row sums."""
    if rank > min(n, m) or rank < 1:
        raise DataError(f"rank must lie in [1, min(n, m)], got {rank}")
    rng = make_rng(seed, "synthetic")
    a = rng.standard_normal((n, rank))
    b = rng.standard_normal((rank, m))
    clean = a @ b
    values = clean + noise * rng.standard_normal((n, m)) if noise else clean.copy()
    return DataMatrix(values, continuous_schema(m)), clean.sum(axis=1)
