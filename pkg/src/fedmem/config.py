"""Experiment configuration: a strict JSON schema with validated defaults.

Every section is optional; unknown keys anywhere are rejected so a typo
cannot silently fall back to a default.  See ``configs/`` for examples.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .generator import GeneratorConfig, NoiseSpec
from .partitioning import DropoutSchedule, PartitionSpec
from .personalization import PersonalizationConfig
from .protocol import STRATEGIES, TrainingConfig


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    num_classes: int = 10
    dim: int = 8
    n_per_class: int = 300
    spread: float = 1.0
    layout_seed: int = 0
    path: str | None = None


@dataclass(frozen=True)
class SemanticSpec:
    source: str = "class_means"
    dim: int | None = None
    seed: int = 0
    path: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    test_fraction: float = 0.1
    split_seed: int = 12345
    partition_mode: str = "dirichlet"
    clients: int = 5
    alpha: float = 0.1
    gamma: int = 2
    monopoly_client: int | None = None
    monopoly_classes: tuple[int, ...] = ()
    dropout_clients: tuple[int, ...] = ()
    dropout_round: int = 0
    hidden: tuple[int, ...] = (64, 32)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    strategies: tuple[str, ...] = ("local", "fedavg", "apfl")
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    semantic: SemanticSpec = field(default_factory=SemanticSpec)
    personalization: PersonalizationConfig = field(default_factory=PersonalizationConfig)
    master_seed: int = 0
    repeat: int = 1
    workers: int = 1
    tag: str = ""

    # -- derived -----------------------------------------------------------
    @property
    def seeds(self) -> list[int]:
        return [self.master_seed + i for i in range(self.repeat)]

    def partition_spec(self, seed: int) -> PartitionSpec:
        return PartitionSpec(
            self.partition_mode, self.clients, seed,
            alpha=self.alpha if self.partition_mode == "dirichlet" else None,
            gamma=self.gamma if self.partition_mode == "pathological" else None,
            monopoly_client=self.monopoly_client,
            monopoly_classes=self.monopoly_classes,
        )

    def schedule(self) -> DropoutSchedule:
        return DropoutSchedule(self.clients, frozenset(self.dropout_clients), self.dropout_round)

    def to_dict(self) -> dict:
        return _to_jsonable(asdict(self))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha1(self.canonical().encode()).hexdigest()[:10]

    def run_id(self, seed: int) -> str:
        prefix = f"{self.tag}-" if self.tag else ""
        return f"{prefix}{self.config_hash()}-s{seed}"


def _to_jsonable(x):
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, frozenset, set)):
        items = sorted(x) if isinstance(x, (frozenset, set)) else x
        return [_to_jsonable(v) for v in items]
    return x


# -- parsing ----------------------------------------------------------------

TOP_KEYS = {
    "dataset", "split", "partition", "dropout", "model", "training", "strategies",
    "generator", "noise", "semantic", "personalization", "master_seed", "repeat",
    "workers", "tag",
}
SECTION_KEYS = {
    "dataset": {"kind", "num_classes", "dim", "n_per_class", "spread", "layout_seed", "path"},
    "split": {"test_fraction", "seed"},
    "partition": {"mode", "clients", "alpha", "gamma", "monopoly"},
    "dropout": {"clients", "round"},
    "model": {"hidden"},
    "training": {"local_epochs", "batch_size", "learning_rate", "rounds", "clients_per_round",
                 "mu", "async", "eta0"},
    "generator": {"lambda", "samples_per_class", "epochs", "batch_size", "learning_rate",
                  "hidden", "retrain_each_round", "alpha_normalization"},
    "noise": {"dim"},
    "semantic": {"source", "dim", "seed", "path"},
    "personalization": {"beta", "friend_epochs", "friend_batch_size", "friend_learning_rate",
                        "budget", "seen_ratio"},
}


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigurationError(f"{name}: expected an object")
    unknown = sorted(set(sec) - SECTION_KEYS[name])
    if unknown:
        raise ConfigurationError(f"{name}: unknown key {unknown[0]!r}")
    return sec


def _wrap(key: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{key}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{key}: {exc}") from None


def config_from_dict(doc: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("configuration must be a JSON object")
    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown key {unknown[0]!r}")

    ds = _section(doc, "dataset")
    dataset = _wrap("dataset", DatasetSpec, **ds)
    if dataset.kind not in ("blobs", "csv"):
        raise ConfigurationError(f"dataset.kind: must be 'blobs' or 'csv', got {dataset.kind!r}")
    if dataset.kind == "csv" and not dataset.path:
        raise ConfigurationError("dataset.path: required when kind is 'csv'")
    if dataset.kind == "blobs":
        if dataset.num_classes < 2 or dataset.dim < 2 or dataset.n_per_class < 10 or not dataset.spread > 0:
            raise ConfigurationError(
                "dataset: blobs need num_classes >= 2, dim >= 2, n_per_class >= 10, spread > 0"
            )

    split = _section(doc, "split")
    test_fraction = float(split.get("test_fraction", 0.1))
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"split.test_fraction: must lie in (0, 1), got {test_fraction}")

    part = _section(doc, "partition")
    mode = part.get("mode", "dirichlet")
    clients = int(part.get("clients", 5))
    mono = part.get("monopoly") or {}
    if not isinstance(mono, dict) or set(mono) - {"client", "classes"}:
        raise ConfigurationError("partition.monopoly: expected {'client': int, 'classes': [int]}")

    drop = _section(doc, "dropout")
    model = _section(doc, "model")

    tr = _section(doc, "training")
    strategies = tuple(doc.get("strategies", ("local", "fedavg", "apfl")))
    if not strategies:
        raise ConfigurationError("strategies: at least one strategy is required")
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigurationError(f"strategies: unknown strategy {s!r}; choose from {STRATEGIES}")
    tr_kwargs = {k: v for k, v in tr.items() if k != "async"}
    training = _wrap("training", TrainingConfig, async_mode=bool(tr.get("async", False)), **tr_kwargs)
    if training.clients_per_round is not None and training.clients_per_round > clients:
        raise ConfigurationError(
            f"training.clients_per_round: {training.clients_per_round} exceeds {clients} clients"
        )
    if "fedprox" in strategies and "mu" not in tr:
        training = replace(training, mu=0.01)

    gen = dict(_section(doc, "generator"))
    if "lambda" in gen:
        gen["lam"] = gen.pop("lambda")
    if "hidden" in gen:
        gen["hidden"] = tuple(gen["hidden"])
    generator = _wrap("generator", GeneratorConfig, **gen)
    noise = _wrap("noise", NoiseSpec, **_section(doc, "noise"))
    sem = _wrap("semantic", SemanticSpec, **_section(doc, "semantic"))
    if sem.source not in ("class_means", "file"):
        raise ConfigurationError(f"semantic.source: must be 'class_means' or 'file', got {sem.source!r}")
    if sem.source == "file" and not sem.path:
        raise ConfigurationError("semantic.path: required when source is 'file'")
    if sem.source == "class_means" and dataset.kind != "blobs":
        raise ConfigurationError("semantic.source: class_means needs a blobs dataset; use a file table")
    pers = _wrap("personalization", PersonalizationConfig, **_section(doc, "personalization"))

    cfg = ExperimentConfig(
        dataset=dataset,
        test_fraction=test_fraction,
        split_seed=int(split.get("seed", 12345)),
        partition_mode=mode,
        clients=clients,
        alpha=float(part.get("alpha", 0.1)),
        gamma=int(part.get("gamma", 2)),
        monopoly_client=mono.get("client"),
        monopoly_classes=tuple(int(c) for c in mono.get("classes", ())),
        dropout_clients=tuple(sorted(int(c) for c in drop.get("clients", ()))),
        dropout_round=int(drop.get("round", 0)),
        hidden=tuple(int(h) for h in model.get("hidden", (64, 32))),
        training=training,
        strategies=strategies,
        generator=generator,
        noise=noise,
        semantic=sem,
        personalization=pers,
        master_seed=int(doc.get("master_seed", 0)),
        repeat=int(doc.get("repeat", 1)),
        workers=int(doc.get("workers", 1)),
        tag=str(doc.get("tag", "")),
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-section consistency checks; raises on the first violation."""
    _wrap("partition", cfg.partition_spec, 0)
    _wrap("dropout", cfg.schedule)
    if cfg.repeat < 1:
        raise ConfigurationError("repeat: must be >= 1")
    if cfg.workers < 1:
        raise ConfigurationError("workers: must be >= 1")
    if not cfg.hidden or min(cfg.hidden) < 1:
        raise ConfigurationError("model.hidden: widths must be positive")
    C = cfg.dataset.num_classes if cfg.dataset.kind == "blobs" else None
    if cfg.partition_mode == "pathological" and C is not None:
        if cfg.clients * cfg.gamma < C:
            raise ConfigurationError(
                f"partition: K·γ < C ({cfg.clients}·{cfg.gamma} = {cfg.clients * cfg.gamma} < {C})"
            )
        if cfg.gamma > C:
            raise ConfigurationError(f"partition.gamma: {cfg.gamma} exceeds the class count {C}")
        if len(cfg.monopoly_classes) > cfg.gamma:
            raise ConfigurationError("partition.monopoly: more monopoly classes than gamma slots")
    if C is not None and any(not 0 <= c < C for c in cfg.monopoly_classes):
        raise ConfigurationError(f"partition.monopoly.classes: must lie in [0, {C})")
    if cfg.monopoly_classes and cfg.partition_mode != "pathological":
        raise ConfigurationError("partition.monopoly: only supported with the pathological mode")


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
