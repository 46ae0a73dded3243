"""Class-sorted datasets, CSV ingestion/export, standardization and the mean operator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-12


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Labeled sample with all positives stored before all negatives.

    ``order[i]`` is the row of the original input that became row ``i``; it lets
    exports restore the input order.
    """

    observations: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    order: np.ndarray | None = None
    label_values: tuple[str, str] = ("1", "-1")

    def __post_init__(self):
        X = np.asarray(self.observations, dtype=float)
        y = np.asarray(self.labels, dtype=int)
        if X.ndim != 2:
            raise DataError("observations must be a 2-d array")
        m, d = X.shape
        if m < 2 or d < 2:
            raise DataError(f"need m >= 2 and d >= 2, got m={m}, d={d}")
        if y.shape != (m,):
            raise DataError("labels must be a vector of length m")
        if not np.all(np.isin(y, (-1, 1))):
            raise DataError("labels must be in {-1, +1}")
        if np.any(np.diff(y) > 0):
            raise DataError("labels must list every +1 before every -1")
        if not np.all(np.isfinite(X)):
            raise DataError("observations contain non-finite entries")
        names = tuple(self.feature_names)
        if len(names) != d:
            raise DataError("feature_names length does not match d")
        order = np.arange(m) if self.order is None else np.asarray(self.order, dtype=int)
        if sorted(order.tolist()) != list(range(m)):
            raise DataError("order must be a permutation of range(m)")
        object.__setattr__(self, "observations", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "order", _frozen(order))

    @classmethod
    def from_arrays(cls, X, y, feature_names=None, label_values=("1", "-1")) -> "Dataset":
        """Build a Dataset from unsorted rows; a stable sort puts positives first."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        order = np.argsort(-y, kind="stable")
        if feature_names is None:
            feature_names = [f"x{j}" for j in range(X.shape[1])]
        return cls(X[order], y[order], tuple(feature_names), order, label_values)

    @property
    def m(self) -> int:
        return self.observations.shape[0]

    @property
    def d(self) -> int:
        return self.observations.shape[1]

    @property
    def m_pos(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def m_neg(self) -> int:
        return int(np.sum(self.labels == -1))

    def with_observations(self, X) -> "Dataset":
        return Dataset(X, self.labels, self.feature_names, self.order, self.label_values)

    def subset(self, rows) -> "Dataset":
        """Rows ``rows`` (sorted-space indices), kept in class order."""
        rows = np.sort(np.asarray(rows, dtype=int))
        sub_order = np.argsort(np.argsort(self.order[rows]))
        return Dataset(self.observations[rows], self.labels[rows], self.feature_names,
                       sub_order, self.label_values)

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise DataError(f"unknown feature {name!r}") from None

    def original_order(self) -> tuple[np.ndarray, np.ndarray]:
        """Observations and labels in input row order."""
        inv = np.empty(self.m, dtype=int)
        inv[self.order] = np.arange(self.m)
        return self.observations[inv], self.labels[inv]


@dataclass(frozen=True)
class CsvTable:
    header: list[str]
    rows: list[list[str]]


def read_csv_table(path) -> CsvTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty CSV file") from None
        rows = [r for r in reader if r]
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"row {k + 1} has {len(r)} cells, header has {len(header)}")
    return CsvTable([h.strip() for h in header], rows)


def dataset_from_table(table: CsvTable, label_column: str, positive_label: str,
                       missing: str = "error") -> Dataset:
    if missing not in ("zero", "error"):
        raise DataError("missing must be 'zero' or 'error'")
    if label_column not in table.header:
        raise DataError(f"missing column {label_column!r}")
    li = table.header.index(label_column)
    raw_labels = [r[li].strip() for r in table.rows]
    values = sorted(set(raw_labels))
    if len(values) > 2:
        raise DataError(f"more than two label values: {values}")
    positive_label = str(positive_label)
    y = np.array([1 if v == positive_label else -1 for v in raw_labels], dtype=int)
    if not np.any(y == 1) or not np.any(y == -1):
        raise DataError("empty class: both labels must occur")
    negative = next((v for v in values if v != positive_label), "")

    cols = [j for j in range(len(table.header)) if j != li]
    X = np.empty((len(table.rows), len(cols)))
    for i, r in enumerate(table.rows):
        for k, j in enumerate(cols):
            cell = r[j].strip()
            if cell == "":
                if missing == "zero":
                    X[i, k] = 0.0
                    continue
                raise DataError(f"missing value at row {i + 1}, column {table.header[j]!r}")
            try:
                X[i, k] = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell {cell!r} at row {i + 1}, "
                                f"column {table.header[j]!r}") from None
            if not math.isfinite(X[i, k]):
                raise DataError(f"non-finite cell at row {i + 1}, column {table.header[j]!r}")
    names = [table.header[j] for j in cols]
    return Dataset.from_arrays(X, y, names, (positive_label, negative))


def ingest_csv(path, label_column: str, positive_label: str, missing: str = "error") -> Dataset:
    """Read a comma-separated UTF-8 file with a header row into a class-sorted Dataset."""
    return dataset_from_table(read_csv_table(path), label_column, positive_label, missing)


def export_csv(ds: Dataset, path, label_column: str = "label") -> None:
    """Write ``ds`` in its original row order, label column last."""
    X, y = ds.original_order()
    pos, neg = ds.label_values
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ds.feature_names) + [label_column])
        for row, lab in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [pos if lab == 1 else neg])


@dataclass(frozen=True)
class ScalingParams:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.constant is None:
            object.__setattr__(self, "constant", np.zeros(len(self.mean), dtype=bool))


def standardize(train: Dataset) -> tuple[Dataset, ScalingParams]:
    """Zero mean, unit (population) std per feature; constant features become 0 and are flagged."""
    X = train.observations
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    constant = sd <= STD_FLOOR
    sd = np.where(constant, STD_FLOOR, sd)
    params = ScalingParams(mu, sd, constant)
    return apply_scaling(train, params), params


def apply_scaling(ds: Dataset, p: ScalingParams) -> Dataset:
    Z = (ds.observations - p.mean) / p.std
    Z[:, p.constant] = 0.0
    return ds.with_observations(Z)


def signed_mean(X, y) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    return (y @ X) / len(y)


def mean_operator(ds: Dataset) -> np.ndarray:
    """(1/m) sum_i y_i x_i."""
    return signed_mean(ds.observations, ds.labels)


def permute_table(table: CsvTable, ds: Dataset, columns, perm) -> CsvTable:
    """Apply a sorted-space permutation to raw cells of ``columns``, keeping input row order.

    Input row ``order[i]`` receives the cells of input row ``order[perm[i]]``.
    """
    perm = np.asarray(getattr(perm, "perm", perm))
    cols = [table.header.index(c) for c in columns]
    rows = [list(r) for r in table.rows]
    for i, src in enumerate(perm):
        dst_row, src_row = int(ds.order[i]), int(ds.order[src])
        for j in cols:
            rows[dst_row][j] = table.rows[src_row][j]
    return CsvTable(list(table.header), rows)


def write_csv_table(table: CsvTable, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        w.writerows(table.rows)
