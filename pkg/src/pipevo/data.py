"""Datasets, synthetic generators and the holdout + k-fold split plan."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pipevo.errors import ParseError, SingleClassDataset, TooFewRows


class DegenerateStratification(UserWarning):
    """A class is too small to stratify the folds; falling back to a plain split."""


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError(f"X shape {X.shape} does not match {len(y)} labels")
        if not np.isfinite(X).all():
            raise ValueError("dataset contains NaN or infinite values")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape

    def subset(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.X[idx], self.y[idx]

    def to_csv_text(self, label: str = "label") -> str:
        """CSV with exact float round-trip (``repr`` formatting)."""
        header = [f"f{i}" for i in range(self.X.shape[1])] + [label]
        lines = [",".join(header)]
        for row, target in zip(self.X.tolist(), self.y.tolist()):
            lines.append(",".join(map(repr, row)) + f",{target}")
        return "\n".join(lines) + "\n"


def _as_float(text: str) -> float | None:
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def parse_csv_text(text: str, label_column: str, name: str = "csv") -> Dataset:
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise ParseError(1, 0, "missing header row")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise ParseError(1, label_column, "label column not in header")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise TooFewRows("no data rows")
    width = len(header)
    for i, r in enumerate(body, start=2):
        if len(r) != width:
            raise ParseError(i, len(r), f"expected {width} cells")

    label_idx = header.index(label_column)
    features = []
    for col in range(width):
        if col == label_idx:
            continue
        cells = [r[col].strip() for r in body]
        numeric = _as_float(cells[0]) is not None
        values = []
        codes: dict[str, int] = {}
        for line, cell in enumerate(cells, start=2):
            if numeric:
                v = _as_float(cell)
                if v is None:
                    raise ParseError(line, header[col], f"unparseable numeric cell {cell!r}")
                values.append(v)
            else:
                if not cell:
                    raise ParseError(line, header[col], "empty categorical cell")
                values.append(float(codes.setdefault(cell, len(codes))))
        features.append(values)

    raw_labels = [r[label_idx].strip() for r in body]
    for line, cell in enumerate(raw_labels, start=2):
        if not cell:
            raise ParseError(line, label_column, "empty label")
    numeric_labels = [_as_float(v) for v in raw_labels]
    if all(v is not None for v in numeric_labels):
        classes = {v: i for i, v in enumerate(sorted(set(numeric_labels)))}
        y = [classes[v] for v in numeric_labels]
    else:
        codes = {}
        y = [codes.setdefault(v, len(codes)) for v in raw_labels]
        classes = codes
    if len(classes) < 2:
        raise SingleClassDataset(f"label column {label_column!r} has a single class")
    X = np.array(features, dtype=np.float64).T.reshape(len(body), width - 1)
    return Dataset(name, X, np.array(y), len(classes))


def load_csv(path: str | Path, label_column: str) -> Dataset:
    """Read a header-first, comma-separated UTF-8 file.

    Numeric columns are parsed as floats, string columns are integer-encoded
    in first-appearance order. Numeric labels are mapped to ``0..k-1`` in
    ascending order, string labels in first-appearance order. Errors carry the
    1-based line number of the offending row.
    """
    path = Path(path)
    return parse_csv_text(path.read_text(encoding="utf-8"), label_column, name=path.stem)


def _shuffled(X: np.ndarray, y: np.ndarray, rng: np.random.Generator):
    perm = rng.permutation(len(y))
    return X[perm], y[perm]


def synth_moons(n_rows: int = 1000, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    if n_rows < 10:
        raise TooFewRows("synthetic datasets need at least 10 rows")
    rng = np.random.default_rng(seed)
    n_out = n_rows // 2
    n_in = n_rows - n_out
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    X = np.vstack([
        np.column_stack([np.cos(t_out), np.sin(t_out)]),
        np.column_stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)]),
    ])
    X = X + rng.normal(scale=noise_std, size=X.shape)
    y = np.r_[np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)]
    X, y = _shuffled(X, y, rng)
    return Dataset("synthetic_moons", X, y, 2)


def synth_blobs(n_rows: int = 100_000, n_features: int = 10, seed: int = 0) -> Dataset:
    """Two unit-covariance Gaussian clusters whose centres are 6 sigma apart."""
    if n_rows < 10:
        raise TooFewRows("synthetic datasets need at least 10 rows")
    rng = np.random.default_rng(seed)
    n0 = n_rows // 2
    n1 = n_rows - n0
    offset = np.full(n_features, 6.0 / math.sqrt(n_features))
    X = np.vstack([rng.normal(size=(n0, n_features)), rng.normal(size=(n1, n_features)) + offset])
    y = np.r_[np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)]
    X, y = _shuffled(X, y, rng)
    return Dataset("synthetic_blobs", X, y, 2)


@dataclass(frozen=True, eq=False)
class SplitPlan:
    train_indices: np.ndarray
    validation_indices: np.ndarray
    fold_assignments: dict[int, tuple[np.ndarray, np.ndarray]]
    seed: int

    @property
    def n_folds(self) -> int:
        return len(self.fold_assignments)


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    exact = counts * (total / counts.sum())
    alloc = np.floor(exact).astype(int)
    short = total - alloc.sum()
    order = np.argsort(-(exact - alloc), kind="stable")
    alloc[order[:short]] += 1
    return alloc


def make_split_plan(dataset: Dataset, validation_fraction: float = 0.3, folds: int = 5, seed: int = 0) -> SplitPlan:
    """Stratified holdout, then stratified k-fold over the training part."""
    n = len(dataset.y)
    if n < 10:
        raise TooFewRows(f"{n} rows, need at least 10")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    y = dataset.y
    classes = np.unique(y)
    per_class = [rng.permutation(np.flatnonzero(y == c)) for c in classes]
    n_val = int(round(validation_fraction * n))
    val_alloc = _largest_remainder(np.array([len(p) for p in per_class], dtype=float), n_val)
    val_parts = [p[:k] for p, k in zip(per_class, val_alloc)]
    train_parts = [p[k:] for p, k in zip(per_class, val_alloc)]
    train = np.sort(np.concatenate(train_parts))
    validation = np.sort(np.concatenate(val_parts))
    if len(train) < folds:
        raise TooFewRows(f"{len(train)} training rows for {folds} folds")

    if all(len(p) >= folds for p in train_parts):
        ordered = np.concatenate(train_parts)
    else:
        warnings.warn("class too small for stratified folds; using unstratified folds",
                      DegenerateStratification, stacklevel=2)
        ordered = rng.permutation(train)
    fold_of = np.arange(len(ordered)) % folds
    assignments = {}
    for k in range(folds):
        score = np.sort(ordered[fold_of == k])
        fit = np.sort(ordered[fold_of != k])
        assignments[k] = (fit, score)
    return SplitPlan(train, validation, assignments, seed)
