"""Server-side data-free training of the conditional semantic generator.

The generator maps ``concat(z, A(y))`` (Gaussian noise and a class's
semantic embedding) to a synthetic feature vector.  It is trained only
against frozen client classifiers: gradients pass through the classifiers
into the synthetic samples and from there into the generator weights, but
the classifiers themselves are never updated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datasets import Dataset
from .errors import ConfigurationError, NumericError, SemanticError, TrainingError
from .numerics import (
    AdamState,
    Gradients,
    ParamSet,
    adam_step,
    backward_from_cache,
    cross_entropy_rows,
    forward,
    forward_with_cache,
    init_mlp,
)
from .partitioning import ClientShards


@dataclass(frozen=True, eq=False)
class SemanticTable:
    """Per-class embedding vectors plus the disjoint seen/unseen class sets."""

    embeddings: Mapping[int, np.ndarray]
    seen: frozenset[int] = frozenset()
    unseen: frozenset[int] = frozenset()

    def __post_init__(self):
        emb = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.embeddings.items()}
        if not emb:
            raise ConfigurationError("semantic table is empty")
        dims = {v.shape for v in emb.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ConfigurationError(f"embeddings must be vectors of one length, got {dims}")
        if not all(np.all(np.isfinite(v)) for v in emb.values()):
            raise ConfigurationError("semantic embeddings must be finite")
        seen, unseen = frozenset(map(int, self.seen)), frozenset(map(int, self.unseen))
        if seen & unseen:
            raise ConfigurationError(f"classes {sorted(seen & unseen)} are both seen and unseen")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "seen", seen)
        object.__setattr__(self, "unseen", unseen)

    @property
    def dim(self) -> int:
        return len(next(iter(self.embeddings.values())))

    @property
    def classes(self) -> list[int]:
        return sorted(self.embeddings)

    def __contains__(self, y: int) -> bool:
        return int(y) in self.embeddings

    def lookup(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        missing = sorted(set(labels.tolist()) - set(self.embeddings))
        if missing:
            raise SemanticError(f"no semantic embedding for class {missing[0]}")
        table = np.zeros((max(self.embeddings) + 1, self.dim))
        for k, v in self.embeddings.items():
            table[k] = v
        return table[labels]

    def with_split(self, seen, unseen) -> "SemanticTable":
        return SemanticTable(self.embeddings, frozenset(seen), frozenset(unseen))

    @classmethod
    def from_class_means(
        cls, means: np.ndarray, seen=(), unseen=(), dim: int | None = None, seed: int = 0
    ) -> "SemanticTable":
        """Use class centroids as embeddings, optionally randomly projected to ``dim``."""
        means = np.asarray(means, dtype=np.float64)
        if dim is not None and dim != means.shape[1]:
            proj = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(dim), size=(means.shape[1], dim))
            means = means @ proj
        return cls({c: means[c] for c in range(len(means))}, frozenset(seen), frozenset(unseen))

    def to_json(self) -> str:
        doc = {str(k): v.tolist() for k, v in sorted(self.embeddings.items())}
        doc["seen"] = sorted(self.seen)
        doc["unseen"] = sorted(self.unseen)
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SemanticTable":
        doc = json.loads(text)
        seen = doc.pop("seen", [])
        unseen = doc.pop("unseen", [])
        try:
            emb = {int(k): v for k, v in doc.items()}
        except ValueError as exc:
            raise ConfigurationError(f"semantic table keys must be class ids: {exc}") from None
        return cls(emb, frozenset(seen), frozenset(unseen))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SemanticTable":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class NoiseSpec:
    dim: int = 20

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError(f"noise dim must be >= 1, got {self.dim}")


@dataclass(frozen=True, eq=False)
class ClassProportionTable:
    """``alpha[i, y]``: rows of class y on client ``client_ids[i]`` over all non-dropout rows."""

    client_ids: tuple[int, ...]
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != len(self.client_ids):
            raise ConfigurationError(f"alpha table shape {a.shape} does not match {len(self.client_ids)} clients")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ConfigurationError("alpha entries must be finite and non-negative")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "client_ids", tuple(int(k) for k in self.client_ids))

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[1]

    def weight(self, client_id: int, y: int) -> float:
        return float(self.alpha[self.client_ids.index(client_id), y])

    def seen_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.alpha.sum(axis=0) > 0)]

    @classmethod
    def from_shards(
        cls, train: Dataset, shards: ClientShards, clients: Sequence[int], normalization: str = "global"
    ) -> "ClassProportionTable":
        """Proportions from the non-dropout clients' label counts.

        ``"global"`` divides each count by all non-dropout training rows.
        ``"class"`` divides by the class's own row count, so the weights of
        every seen class sum to one across clients.
        """
        ids = tuple(sorted(int(k) for k in clients))
        hist = shards.histograms(train)[list(ids)].astype(np.float64)
        if hist.sum() <= 0:
            raise ConfigurationError("non-dropout clients hold no training rows")
        if normalization == "global":
            return cls(ids, hist / hist.sum())
        if normalization == "class":
            col = hist.sum(axis=0, keepdims=True)
            return cls(ids, np.divide(hist, col, out=np.zeros_like(hist), where=col > 0))
        raise ConfigurationError(f"unknown alpha normalization {normalization!r}")


@dataclass(frozen=True)
class GeneratorConfig:
    lam: float = 0.5
    samples_per_class: int = 600
    epochs: int = 2
    batch_size: int = 50
    learning_rate: float = 2e-4
    hidden: tuple[int, ...] = (64, 64)
    # The diversity term is unbounded below, so warm-started retraining every
    # round compounds the spread growth; the default trains once at the end.
    retrain_each_round: bool = False
    alpha_normalization: str = "global"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.samples_per_class < 2:
            raise ConfigurationError("samples_per_class must be >= 2 for the diversity loss")
        if self.epochs < 0 or self.batch_size < 2 or not self.learning_rate > 0:
            raise ConfigurationError("generator epochs >= 0, batch_size >= 2, learning_rate > 0 required")
        if self.alpha_normalization not in ("global", "class"):
            raise ConfigurationError("alpha_normalization must be 'global' or 'class'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def sample_noise(n: int, spec: NoiseSpec, seed) -> np.ndarray:
    if n < 1:
        raise ConfigurationError(f"need n >= 1 noise rows, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((n, spec.dim))


def init_generator(noise_dim: int, semantic_dim: int, out_dim: int, hidden=(64, 64), seed=0) -> ParamSet:
    return init_mlp([noise_dim + semantic_dim, *hidden, out_dim], seed=seed, prefix="g")


def generator_input(Z: np.ndarray, labels, A: SemanticTable) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if Z.ndim != 2 or len(Z) != len(labels):
        raise ConfigurationError(f"noise {Z.shape} does not match {len(labels)} labels")
    return np.concatenate([Z, A.lookup(labels)], axis=1)


def generate(omega: ParamSet, Z: np.ndarray, labels, A: SemanticTable) -> np.ndarray:
    """Synthetic features, one row per (noise row, label)."""
    return forward(omega, generator_input(Z, labels, A))


# -- losses -----------------------------------------------------------------

def classification_loss_and_grad(
    x_hat: np.ndarray,
    labels,
    client_models: Mapping[int, ParamSet],
    alpha: ClassProportionTable,
) -> tuple[float, np.ndarray]:
    """Proportion-weighted cross-entropy of the frozen clients on synthetic rows.

    Row ``i`` with label ``y`` contributes ``sum_k alpha[k, y] * CE_k(i)``;
    the loss is the mean over rows.  Clients are visited in ascending id order.
    Returns the loss and its gradient with respect to ``x_hat``.
    """
    if not client_models:
        raise ConfigurationError("classification loss needs at least one client model")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    loss = 0.0
    grad = np.zeros_like(x_hat)
    for k in sorted(client_models):
        if k not in alpha.client_ids:
            raise ConfigurationError(f"client {k} has no row in the proportion table")
        w = alpha.alpha[alpha.client_ids.index(k)][labels]
        if not np.any(w):
            continue
        model = client_models[k]
        cache = forward_with_cache(model, x_hat)
        rows, g = cross_entropy_rows(cache.result, labels)
        loss += float(np.dot(w, rows)) / n
        _, gx = backward_from_cache(model, cache, g * (w / n)[:, None], param_grads=False)
        grad += gx
    return loss, grad


def classification_loss(x_hat, labels, client_models: Mapping[int, ParamSet], alpha: ClassProportionTable) -> float:
    return classification_loss_and_grad(x_hat, labels, client_models, alpha)[0]


def _pairwise(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = x[:, None, :] - x[None, :, :]
    return diff, np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def diversity_loss(x_hat: np.ndarray) -> float:
    """Negative mean pairwise Euclidean distance among one class's samples."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    n = len(x_hat)
    if n < 2:
        raise ConfigurationError(f"diversity loss needs at least 2 samples, got {n}")
    _, dist = _pairwise(x_hat)
    return -float(dist.sum()) / (n * (n - 1))


def diversity_loss_and_grad(x_hat: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Per-class diversity loss averaged over classes with at least two rows."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    grad = np.zeros_like(x_hat)
    classes = [c for c in np.unique(labels) if np.count_nonzero(labels == c) >= 2]
    if not classes:
        return 0.0, grad
    total = 0.0
    for c in classes:
        rows = np.flatnonzero(labels == c)
        x = x_hat[rows]
        n = len(rows)
        diff, dist = _pairwise(x)
        total += -float(dist.sum()) / (n * (n - 1))
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[:, :, None] > 0, diff / dist[:, :, None], 0.0)
        grad[rows] = -2.0 * unit.sum(axis=1) / (n * (n - 1))
    m = len(classes)
    return total / m, grad / m


def generator_loss(l_cls: float, l_div: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")
    return lam * l_cls + (1.0 - lam) * l_div


@dataclass(frozen=True, eq=False)
class GeneratorObjective:
    """Composite generator loss usable with :func:`fedmem.numerics.backward`.

    ``batch`` is the noise matrix and ``labels`` the requested classes.
    """

    client_models: Mapping[int, ParamSet]
    alpha: ClassProportionTable
    semantic: SemanticTable
    lam: float = 0.5

    def terms(self, omega: ParamSet, Z, labels) -> tuple[float, float, float, Gradients]:
        cache = forward_with_cache(omega, generator_input(Z, labels, self.semantic))
        x_hat = cache.result
        l_cls, g_cls = classification_loss_and_grad(x_hat, labels, self.client_models, self.alpha)
        l_div, g_div = diversity_loss_and_grad(x_hat, labels)
        g = self.lam * g_cls + (1.0 - self.lam) * g_div
        grads, _ = backward_from_cache(omega, cache, g)
        return generator_loss(l_cls, l_div, self.lam), l_cls, l_div, grads

    def value_and_grad(self, omega: ParamSet, Z, labels) -> tuple[float, Gradients]:
        loss, _, _, grads = self.terms(omega, Z, labels)
        return loss, grads


@dataclass
class GeneratorHistory:
    loss_G: list[float] = field(default_factory=list)
    L_cls: list[float] = field(default_factory=list)
    L_div: list[float] = field(default_factory=list)


def train_generator(
    omega0: ParamSet,
    client_models: Mapping[int, ParamSet],
    alpha: ClassProportionTable,
    A: SemanticTable,
    cfg: GeneratorConfig,
    noise: NoiseSpec,
    seed,
    adam: AdamState | None = None,
) -> tuple[ParamSet, AdamState, GeneratorHistory]:
    """Adam on the generator weights only.

    Each epoch draws fresh noise for ``samples_per_class`` rows of every
    seen class (classes with positive proportion), shuffles them and takes
    one step per minibatch.  The history holds per-epoch means of the three
    loss terms.  Passing ``adam`` continues an earlier optimiser state.
    """
    if not client_models:
        raise ConfigurationError("generator training needs at least one non-dropout client model")
    seen = alpha.seen_classes()
    missing = [c for c in seen if c not in A]
    if missing:
        raise SemanticError(f"no semantic embedding for seen class {missing[0]}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    objective = GeneratorObjective(client_models, alpha, A, cfg.lam)
    omega = omega0
    state = AdamState.fresh(omega) if adam is None else adam
    history = GeneratorHistory()
    labels_all = np.repeat(np.array(seen, dtype=np.int64), cfg.samples_per_class)
    for epoch in range(cfg.epochs):
        Z = sample_noise(len(labels_all), noise, rng)
        order = rng.permutation(len(labels_all))
        sums = np.zeros(3)
        steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            rows = order[lo : lo + cfg.batch_size]
            lg, lc, ld, grads = objective.terms(omega, Z[rows], labels_all[rows])
            if not np.isfinite(lg):
                raise TrainingError(f"generator loss diverged at epoch {epoch}")
            try:
                omega, state = adam_step(omega, grads, state, cfg.learning_rate)
            except NumericError as exc:
                raise TrainingError(f"generator: {exc} at epoch {epoch}") from None
            sums += (lg, lc, ld)
            steps += 1
        lg, lc, ld = sums / max(steps, 1)
        history.loss_G.append(float(lg))
        history.L_cls.append(float(lc))
        history.L_div.append(float(ld))
    return omega, state, history
