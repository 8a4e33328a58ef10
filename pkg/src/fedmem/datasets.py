"""Synthetic blobs, CSV loading and stratified train/test splitting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError, ParseError


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_means: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InputError(f"features {x.shape} and labels {y.shape} disagree")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.labels[rows], self.num_classes, self.class_means)

    def histogram(self) -> np.ndarray:
        return label_histogram(self.labels, self.num_classes)


def label_histogram(labels, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)


def _draw_means(C: int, d: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    min_dist = 2.0 * spread
    means: list[np.ndarray] = []
    attempts = 0
    while len(means) < C:
        cand = rng.uniform(-5.0, 5.0, size=d)
        attempts += 1
        if all(np.linalg.norm(cand - m) >= min_dist for m in means):
            means.append(cand)
        elif attempts > 10000 * C:
            raise ConfigurationError(
                f"cannot place {C} means in [-5, 5]^{d} at mutual distance {min_dist}; "
                "reduce spread"
            )
    return np.array(means)


def make_blobs(
    C: int,
    d: int,
    n_per_class: int,
    spread: float,
    layout_seed: int = 0,
    sample_seed: int = 0,
) -> Dataset:
    """Isotropic Gaussian class clusters.

    Class means come from ``layout_seed`` only, so the same layout can be
    re-sampled with different ``sample_seed`` values.  Rows are ordered by
    class.
    """
    if C < 2 or d < 2 or n_per_class < 10 or not spread > 0:
        raise ConfigurationError(
            f"make_blobs needs C>=2, d>=2, n_per_class>=10, spread>0 "
            f"(got C={C}, d={d}, n_per_class={n_per_class}, spread={spread})"
        )
    means = _draw_means(C, d, spread, np.random.default_rng(layout_seed))
    rng = np.random.default_rng(sample_seed)
    labels = np.repeat(np.arange(C), n_per_class)
    x = means[labels] + rng.normal(0.0, spread, size=(C * n_per_class, d))
    return Dataset(x, labels, C, means)


def load_csv(path: str | Path) -> Dataset:
    """Read ``f1,...,fd,label`` rows; lines starting with ``#`` are headers."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    rows, labels = [], []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ParseError("need at least one feature and a label", lineno)
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(f"expected {width} columns, found {len(parts)}", lineno)
            try:
                feats = [float(p) for p in parts[:-1]]
                label = int(parts[-1])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if label < 0:
                raise ParseError(f"negative label {label}", lineno)
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise ParseError(f"{path} contains no data rows")
    return Dataset(np.array(rows), np.array(labels), max(labels) + 1)


def save_csv(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("# " + ",".join(f"f{i}" for i in range(ds.dim)) + ",label\n")
        for x, y in zip(ds.features, ds.labels):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")
    return path


def _test_count(count: int, fraction: float) -> int:
    if count < 2:
        return 0
    k = math.floor(count * fraction + 0.5)
    return min(max(k, 1), count - 1)


def split_indices(ds: Dataset, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of a stratified split, each sorted ascending."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(ds.num_classes):
        rows = np.flatnonzero(ds.labels == c)
        if len(rows) == 1:
            warnings.warn(f"class {c} has a single sample; it stays in the training split")
        k = _test_count(len(rows), test_fraction)
        rows = rng.permutation(rows)
        test.append(rows[:k])
        train.append(rows[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_train_test(ds: Dataset, test_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(ds, test_fraction, seed)
    return ds.subset(train_idx), ds.subset(test_idx)
