"""Label-skewed client partitions and permanent-dropout schedules."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import Dataset
from .errors import ConfigurationError, PartitionError


def largest_remainder(total: int, weights: Sequence[float]) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Floors first, then hands the leftover units to the largest fractional
    parts; ties go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or w.ndim != 1 or len(w) == 0 or np.any(w < 0) or not np.isfinite(w).all():
        raise ConfigurationError(f"cannot apportion {total} over weights {w}")
    s = w.sum()
    if s <= 0:
        if total:
            raise ConfigurationError("cannot apportion a positive total over zero weights")
        return np.zeros(len(w), dtype=np.int64)
    quotas = total * w / s
    counts = np.floor(quotas).astype(np.int64)
    rest = total - int(counts.sum())
    if rest:
        order = np.lexsort((np.arange(len(w)), -(quotas - counts)))
        counts[order[:rest]] += 1
    return counts


@dataclass(frozen=True)
class PartitionSpec:
    mode: str
    K: int
    seed: int = 0
    alpha: float | None = None
    gamma: int | None = None
    monopoly_client: int | None = None
    monopoly_classes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.K < 2:
            raise ConfigurationError(f"K must be >= 2, got {self.K}")
        if self.mode == "dirichlet":
            if self.alpha is None or not self.alpha > 0:
                raise ConfigurationError(f"dirichlet alpha must be > 0, got {self.alpha}")
        elif self.mode == "pathological":
            if self.gamma is None or self.gamma < 1:
                raise ConfigurationError(f"pathological gamma must be >= 1, got {self.gamma}")
        else:
            raise ConfigurationError(f"unknown partition mode {self.mode!r}")
        object.__setattr__(self, "monopoly_classes", tuple(int(c) for c in self.monopoly_classes))
        if self.monopoly_classes:
            if self.monopoly_client is None or not 0 <= self.monopoly_client < self.K:
                raise ConfigurationError(
                    f"monopoly client {self.monopoly_client} is not in [0, {self.K})"
                )
            if len(set(self.monopoly_classes)) != len(self.monopoly_classes):
                raise ConfigurationError("monopoly classes contain duplicates")


@dataclass(frozen=True)
class DropoutSchedule:
    """Clients in ``dropout_set`` take no part from ``dropout_round`` on."""

    K: int
    dropout_set: frozenset[int] = field(default_factory=frozenset)
    dropout_round: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dropout_set", frozenset(int(c) for c in self.dropout_set))
        bad = [c for c in self.dropout_set if not 0 <= c < self.K]
        if bad:
            raise ConfigurationError(f"dropout clients {bad} are not in [0, {self.K})")
        if len(self.dropout_set) >= self.K:
            raise ConfigurationError("at least one client must stay online")
        if self.dropout_round < 0:
            raise ConfigurationError("dropout_round must be >= 0")

    @property
    def non_dropout(self) -> frozenset[int]:
        return frozenset(range(self.K)) - self.dropout_set


def availability(schedule: DropoutSchedule, round: int) -> frozenset[int]:
    if round < 0:
        raise ConfigurationError(f"round must be >= 0, got {round}")
    if round < schedule.dropout_round:
        return frozenset(range(schedule.K))
    return schedule.non_dropout


@dataclass(frozen=True, eq=False)
class ClientShards:
    """Row indices into a training set, one sorted array per client."""

    indices: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.indices[k]

    def sizes(self) -> np.ndarray:
        return np.array([len(i) for i in self.indices])

    def histograms(self, ds: Dataset) -> np.ndarray:
        """``[K, C]`` matrix of per-client label counts."""
        return np.stack([np.bincount(ds.labels[i], minlength=ds.num_classes) for i in self.indices])

    def classes_of(self, ds: Dataset, k: int) -> set[int]:
        return set(np.unique(ds.labels[self.indices[k]]).tolist())

    def to_json(self, spec: PartitionSpec | None = None) -> str:
        doc: dict = {"shards": {str(k): idx.tolist() for k, idx in enumerate(self.indices)}}
        if spec is not None:
            doc["spec"] = asdict(spec)
            doc["spec"]["monopoly_classes"] = list(spec.monopoly_classes)
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClientShards":
        doc = json.loads(text)
        shards = doc["shards"]
        return cls(tuple(np.array(shards[str(k)], dtype=np.int64) for k in range(len(shards))))

    def save(self, path: str | Path, spec: PartitionSpec | None = None) -> Path:
        path = Path(path)
        path.write_text(self.to_json(spec))
        return path


def dirichlet_partition(train: Dataset, spec: PartitionSpec, max_attempts: int = 100) -> ClientShards:
    """Per-class Dir(alpha) label skew with largest-remainder row counts.

    The whole draw is repeated while some client ends up empty.
    """
    if spec.mode != "dirichlet":
        raise ConfigurationError("dirichlet_partition needs mode='dirichlet'")
    rng = np.random.default_rng(spec.seed)
    by_class = [np.flatnonzero(train.labels == c) for c in range(train.num_classes)]
    for _ in range(max_attempts):
        parts: list[list[np.ndarray]] = [[] for _ in range(spec.K)]
        for rows in by_class:
            if not len(rows):
                continue
            p = rng.dirichlet(np.full(spec.K, spec.alpha))
            counts = largest_remainder(len(rows), p)
            rows = rng.permutation(rows)
            cut = np.concatenate([[0], np.cumsum(counts)])
            for k in range(spec.K):
                parts[k].append(rows[cut[k] : cut[k + 1]])
        shards = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(s) for s in shards) >= 1:
            return ClientShards(tuple(shards))
    raise PartitionError(
        f"could not give every one of {spec.K} clients a sample in {max_attempts} draws; "
        "use a larger dataset or a larger alpha"
    )


def _assign_classes(spec: PartitionSpec, C: int, rng: np.random.Generator) -> list[list[int]]:
    gamma, K = spec.gamma, spec.K
    mono = list(spec.monopoly_classes)
    if any(not 0 <= c < C for c in mono):
        raise ConfigurationError(f"monopoly classes {mono} are not all in [0, {C})")
    if len(mono) > gamma:
        raise ConfigurationError(
            f"{len(mono)} monopoly classes do not fit into gamma={gamma} slots"
        )
    if gamma > C:
        raise ConfigurationError(f"gamma={gamma} exceeds the class count {C}")
    if K * gamma < C:
        raise ConfigurationError(f"K*gamma = {K * gamma} < C = {C}; some class has no holder")
    free = [c for c in range(C) if c not in set(mono)]
    # Slots to fill with free classes: gamma per ordinary client, plus any
    # leftover on the monopoly client.
    need = [gamma] * K
    if mono:
        need[spec.monopoly_client] = gamma - len(mono)
    total = sum(need)
    if max(need) > len(free):
        raise ConfigurationError(
            f"only {len(free)} non-monopoly classes for clients needing gamma={gamma}"
        )

    for _ in range(1000):
        seq: list[int] = []
        while len(seq) < total:
            seq.extend(rng.permutation(free).tolist())
        out, pos, ok = [], 0, True
        for k in range(K):
            chunk = seq[pos : pos + need[k]]
            pos += need[k]
            if len(set(chunk)) != len(chunk):
                ok = False
                break
            out.append(chunk)
        if ok:
            break
    else:  # deterministic fallback: consecutive windows are always distinct
        out, pos = [], 0
        for k in range(K):
            out.append([free[(pos + j) % len(free)] for j in range(need[k])])
            pos += need[k]
    if mono:
        out[spec.monopoly_client] = mono + out[spec.monopoly_client]
    return [sorted(c) for c in out]


def pathological_partition(train: Dataset, spec: PartitionSpec) -> ClientShards:
    """Each client holds exactly ``gamma`` classes.

    Monopoly classes live only on the designated client.  The remaining
    classes are dealt from shuffled permutations so every class gets at
    least one holder, and each class's rows are split evenly among holders.
    """
    if spec.mode != "pathological":
        raise ConfigurationError("pathological_partition needs mode='pathological'")
    rng = np.random.default_rng(spec.seed)
    classes = _assign_classes(spec, train.num_classes, rng)
    holders: dict[int, list[int]] = {c: [] for c in range(train.num_classes)}
    for k, cs in enumerate(classes):
        for c in cs:
            holders[c].append(k)
    parts: list[list[np.ndarray]] = [[] for _ in range(spec.K)]
    for c in range(train.num_classes):
        rows = rng.permutation(np.flatnonzero(train.labels == c))
        for k, chunk in zip(holders[c], np.array_split(rows, len(holders[c]))):
            parts[k].append(chunk)
    shards = []
    for k, p in enumerate(parts):
        s = np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64)
        if not len(s):
            raise PartitionError(f"client {k} received no rows; dataset too small")
        shards.append(s.astype(np.int64))
    return ClientShards(tuple(shards))


def partition(train: Dataset, spec: PartitionSpec) -> ClientShards:
    if spec.mode == "dirichlet":
        return dirichlet_partition(train, spec)
    return pathological_partition(train, spec)


def assign_test_slices(train: Dataset, shards: ClientShards, test: Dataset) -> ClientShards:
    """Split the global test set so each client's slice mirrors its training labels.

    For every class, the class's test rows are apportioned across clients in
    proportion to how many training rows of that class each client holds.
    """
    hist = shards.histograms(train)
    parts: list[list[np.ndarray]] = [[] for _ in range(len(shards))]
    for c in range(test.num_classes):
        rows = np.flatnonzero(test.labels == c)
        if not len(rows) or hist[:, c].sum() == 0:
            continue
        counts = largest_remainder(len(rows), hist[:, c])
        cut = np.concatenate([[0], np.cumsum(counts)])
        for k in range(len(shards)):
            parts[k].append(rows[cut[k] : cut[k + 1]])
    return ClientShards(
        tuple(
            np.sort(np.concatenate(p)).astype(np.int64) if p else np.array([], dtype=np.int64)
            for p in parts
        )
    )
