"""Friend models trained on synthetic data and decoupled model interpolation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .datasets import Dataset, label_histogram
from .errors import ConfigurationError, InterpolationError
from .generator import NoiseSpec, SemanticTable, generate, sample_noise
from .numerics import ParamSet
from .partitioning import largest_remainder
from .protocol import TrainingConfig, local_train


@dataclass(frozen=True)
class PersonalizationConfig:
    """``beta`` weighs the client (or localized global) model; ``1 - beta`` the friend model."""

    beta: float = 0.1
    friend_epochs: int = 100
    friend_batch_size: int = 50
    friend_learning_rate: float = 2e-4
    budget: int = 600
    seen_ratio: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"beta must lie in [0, 1], got {self.beta}")
        if self.friend_epochs < 0 or self.friend_batch_size < 1 or not self.friend_learning_rate > 0:
            raise ConfigurationError("friend_epochs >= 0, friend_batch_size >= 1, friend_learning_rate > 0 required")
        if self.budget < 1 or self.seen_ratio < 0:
            raise ConfigurationError("budget must be positive and seen_ratio non-negative")

    def friend_training(self) -> TrainingConfig:
        return TrainingConfig(
            local_epochs=self.friend_epochs,
            batch_size=self.friend_batch_size,
            learning_rate=self.friend_learning_rate,
            strategy="local",
        )


@dataclass(frozen=True, eq=False)
class FriendModel:
    params: ParamSet
    label_counts: np.ndarray
    generator_tag: str = ""


def synthesize_for_client(
    omega: ParamSet,
    hist,
    budget: int,
    A: SemanticTable,
    noise: NoiseSpec,
    seed,
) -> Dataset:
    """Synthetic rows whose label counts follow ``hist`` by largest remainder."""
    hist = np.asarray(hist, dtype=np.float64)
    present = int(np.count_nonzero(hist))
    if present == 0:
        raise ConfigurationError("label histogram is empty")
    if budget < present:
        raise ConfigurationError(f"budget {budget} cannot cover {present} present classes")
    counts = largest_remainder(budget, hist)
    # every present class gets a row even when its quota rounds to zero
    for c in np.flatnonzero((hist > 0) & (counts == 0)):
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[c] += 1
    labels = np.repeat(np.arange(len(hist)), counts)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Z = sample_noise(len(labels), noise, rng)
    x = generate(omega, Z, labels, A)
    return Dataset(x, labels, len(hist))


def train_friend_model(
    synthetic: Dataset,
    init: ParamSet,
    cfg: PersonalizationConfig,
    seed,
    generator_tag: str = "",
) -> FriendModel:
    """Train a classifier from ``init`` on generator output only."""
    if not len(synthetic):
        raise ConfigurationError("friend model needs a non-empty synthetic set")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = local_train(init, synthetic, cfg.friend_training(), rng, context="friend model")
    return FriendModel(params, synthetic.histogram(), generator_tag)


def interpolate(a: ParamSet, b: ParamSet, beta: float) -> ParamSet:
    """Elementwise ``beta * a + (1 - beta) * b``, exact at both endpoints."""
    if not a.layout_equal(b):
        raise InterpolationError("cannot interpolate ParamSets with different layouts")
    if not 0.0 <= beta <= 1.0:
        raise InterpolationError(f"beta must lie in [0, 1], got {beta}")
    if beta == 1.0:
        return a.copy()
    if beta == 0.0:
        return b.copy()
    return a.with_arrays([beta * x + (1.0 - beta) * y for x, y in zip(a.arrays(), b.arrays())])


def localize_global(global_params: ParamSet, shard: Dataset, cfg: TrainingConfig, seed) -> ParamSet:
    """Fine-tune the global model on a dropout client's own data."""
    if not len(shard):
        warnings.warn("dropout client has no local data; using the global model as is")
        return global_params
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return local_train(global_params, shard, replace(cfg, strategy="local"), rng, context="localize global")


def dropout_histogram(local_hist, A: SemanticTable, seen_ratio: float) -> np.ndarray:
    """Local (unseen) class counts plus ``seen_ratio`` times that mass spread over seen classes."""
    local_hist = np.asarray(local_hist, dtype=np.float64)
    out = local_hist.copy()
    seen = [c for c in sorted(A.seen) if c < len(out) and local_hist[c] == 0]
    if seen and seen_ratio > 0:
        out[seen] += seen_ratio * local_hist.sum() / len(seen)
    return out


@dataclass(frozen=True, eq=False)
class Personalized:
    params: ParamSet
    friend: FriendModel
    base: ParamSet


def personalize(
    mode: str,
    base_params: ParamSet,
    local_data: Dataset,
    omega: ParamSet,
    A: SemanticTable,
    friend_init: ParamSet,
    cfg: PersonalizationConfig,
    noise: NoiseSpec,
    seed: int,
    localize_cfg: TrainingConfig | None = None,
) -> Personalized:
    """Personalized model for one client.

    ``non_dropout``: ``base_params`` is the client's own final local model.
    ``dropout``: ``base_params`` is the global model, first localized on the
    client's data; the friend model also sees seen-class synthesis so it
    covers the full label space.
    """
    if mode not in ("non_dropout", "dropout"):
        raise ConfigurationError(f"unknown personalization mode {mode!r}")
    rng = np.random.default_rng([int(seed), 1])
    hist = label_histogram(local_data.labels, local_data.num_classes)
    if mode == "dropout":
        base = localize_global(base_params, local_data, localize_cfg or TrainingConfig(), np.random.default_rng([int(seed), 2]))
        target = dropout_histogram(hist, A, cfg.seen_ratio)
        budget = int(round(cfg.budget * (1.0 + cfg.seen_ratio)))
    else:
        base = base_params
        target = hist
        budget = cfg.budget
    synthetic = synthesize_for_client(omega, target, budget, A, noise, rng)
    friend = train_friend_model(synthetic, friend_init, cfg, rng)
    return Personalized(interpolate(base, friend.params, cfg.beta), friend, base)
