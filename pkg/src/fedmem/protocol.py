"""Federated rounds: client selection, local training and server aggregation.

Randomness for a client's local training comes from a stream keyed by
``(master_seed, client_id, round)``, so results do not depend on the order
in which clients happen to run.  Aggregation always sums in ascending client
id order, which keeps threaded and sequential execution bit-identical.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .datasets import Dataset
from .errors import AggregationError, ConfigurationError, NumericError, TrainingError
from .metrics import MetricsRecord
from .numerics import FlatAdam, FlatModel, ParamSet, forward, softmax_cross_entropy
from .partitioning import DropoutSchedule, availability

log = logging.getLogger(__name__)

STRATEGIES = ("local", "fedavg", "fedprox", "apfl")

# Stream tags keep independent uses of the same (seed, client, round) apart.
TAG_LOCAL = 0
TAG_SELECT = 1
TAG_ARRIVAL = 2
TAG_FINETUNE = 3


def stream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), *(int(k) for k in key)])


@dataclass(frozen=True)
class TrainingConfig:
    local_epochs: int = 20
    batch_size: int = 50
    learning_rate: float = 2e-4
    strategy: str = "fedavg"
    mu: float = 0.0
    rounds: int = 30
    clients_per_round: int | None = None
    async_mode: bool = False
    eta0: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.local_epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigurationError("local_epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ConfigurationError("clients_per_round must be positive")
        if self.mu < 0:
            raise ConfigurationError("mu must be >= 0")
        if not 0 < self.eta0 <= 1:
            raise ConfigurationError("eta0 must lie in (0, 1]")

    @property
    def proximal_mu(self) -> float | None:
        return self.mu if self.strategy == "fedprox" else None


@dataclass
class ServerState:
    global_params: ParamSet
    round: int = 0
    version: int = 0
    pulled: dict[int, int] = field(default_factory=dict)


@dataclass
class ClientState:
    id: int
    train: Dataset
    test: Dataset
    params: ParamSet | None = None
    available: bool = True


def select_clients(available, m: int | None, seed: int, round: int) -> tuple[int, ...]:
    """Uniform sample of ``m`` clients without replacement, sorted by id."""
    pool = sorted(available)
    if not pool:
        log.warning("round %d: no clients available, round skipped", round)
        return ()
    if m is None or m >= len(pool):
        if m is not None and m > len(pool):
            log.info("round %d: %d requested but only %d available", round, m, len(pool))
        return tuple(pool)
    picked = stream(seed, round, TAG_SELECT).choice(pool, size=m, replace=False)
    return tuple(sorted(int(k) for k in picked))


def local_train(
    start_params: ParamSet,
    shard: Dataset,
    cfg: TrainingConfig,
    rng: np.random.Generator,
    epochs: int | None = None,
    context: str = "",
) -> ParamSet:
    """Adam minibatch training on cross-entropy (plus the proximal term for FedProx).

    A fresh Adam state is used for every call; ``start_params`` is not
    modified.  With ``mu == 0`` the proximal term is skipped entirely, so
    FedProx reduces to FedAvg bit for bit.
    """
    epochs = cfg.local_epochs if epochs is None else epochs
    if epochs and not len(shard):
        raise TrainingError(f"{context or 'local_train'}: empty shard")
    if not epochs:
        return start_params
    mu = cfg.proximal_mu
    model = FlatModel(start_params)
    opt = FlatAdam(model.flat.size)
    anchor = start_params.flatten() if mu else None
    x_all, y_all = shard.features, shard.labels
    n = len(shard)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo : lo + cfg.batch_size]
            cache = model.forward_cache(x_all[rows])
            loss, g = softmax_cross_entropy(cache.result, y_all[rows])
            model.backward(cache, g)
            if anchor is not None:
                diff = model.flat - anchor
                loss += 0.5 * mu * float(diff @ diff)
                model.grad += mu * diff
            if not np.isfinite(loss):
                raise TrainingError(f"{context or 'local_train'}: non-finite loss at epoch {epoch}")
            try:
                opt.step(model.flat, model.grad, cfg.learning_rate)
            except NumericError as exc:
                raise TrainingError(f"{context or 'local_train'}: {exc} at epoch {epoch}") from None
    return model.to_params()


def aggregate(updates) -> ParamSet:
    """Weighted parameter average.

    ``updates`` is either a mapping ``client_id -> (params, weight)`` or a
    sequence of ``(params, weight)`` pairs (positions act as client ids).
    Weights are renormalised to sum to one and summed in ascending id order.
    """
    items = sorted(updates.items()) if isinstance(updates, Mapping) else list(enumerate(updates))
    if not items:
        raise AggregationError("nothing to aggregate")
    ref = items[0][1][0]
    for cid, (p, w) in items:
        if not p.layout_equal(ref):
            raise AggregationError(f"client {cid}: parameter layout differs from client {items[0][0]}")
        if not w > 0:
            raise AggregationError(f"client {cid}: weight must be positive, got {w}")
    total = float(sum(w for _, (_, w) in items))
    acc = None
    for _, (p, w) in items:
        share = w / total
        term = [share * a for a in p.arrays()]
        acc = term if acc is None else [x + y for x, y in zip(acc, term)]
    return ref.with_arrays(acc)


def staleness_weight(staleness: int, eta0: float = 0.5) -> float:
    return eta0 / (1.0 + staleness)


def async_mix(global_params: ParamSet, client_params: ParamSet, staleness: int, eta0: float = 0.5) -> ParamSet:
    eta = staleness_weight(staleness, eta0)
    if eta == 1.0:
        return client_params
    return global_params.with_arrays(
        [(1.0 - eta) * g + eta * c for g, c in zip(global_params.arrays(), client_params.arrays())]
    )


def evaluate(params: ParamSet, ds: Dataset) -> tuple[float, np.ndarray]:
    """Top-1 accuracy and per-class accuracy (NaN for classes with no rows)."""
    if not len(ds):
        raise ConfigurationError("cannot evaluate on an empty dataset")
    pred = np.argmax(forward(params, ds.features), axis=1)
    hit = pred == ds.labels
    per_class = np.full(ds.num_classes, np.nan)
    for c in range(ds.num_classes):
        mask = ds.labels == c
        if mask.any():
            per_class[c] = hit[mask].mean()
    return float(hit.mean()), per_class


def accuracy_records(
    params: ParamSet, ds: Dataset, round: int, strategy: str, client_id: str,
    split: str = "test", per_class: bool = False,
) -> list[MetricsRecord]:
    if not len(ds):
        return []
    acc, pc = evaluate(params, ds)
    out = [MetricsRecord(round, strategy, client_id, split, "accuracy", acc)]
    if per_class:
        out += [
            MetricsRecord(round, strategy, client_id, split, f"per_class_accuracy:{c}", float(v))
            for c, v in enumerate(pc)
        ]
    return out


def _train_selected(
    server: ServerState,
    clients: Sequence[ClientState],
    selected: Sequence[int],
    cfg: TrainingConfig,
    master_seed: int,
    workers: int,
) -> dict[int, ParamSet]:
    by_id = {c.id: c for c in clients}

    def job(k: int) -> ParamSet:
        return local_train(
            server.global_params, by_id[k].train, cfg,
            stream(master_seed, k, server.round, TAG_LOCAL),
            context=f"round {server.round}, client {k}",
        )

    if workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, selected))
    else:
        results = [job(k) for k in selected]
    return dict(zip(selected, results))


def _round_records(
    server: ServerState, clients: Sequence[ClientState], global_test: Dataset | None, label: str,
    per_client: bool = True,
) -> list[MetricsRecord]:
    recs: list[MetricsRecord] = []
    if global_test is not None:
        recs += accuracy_records(server.global_params, global_test, server.round, label, "global", per_class=True)
    if per_client:
        for c in clients:
            recs += accuracy_records(server.global_params, c.test, server.round, label, str(c.id))
    return recs


def run_round_sync(
    server: ServerState,
    clients: Sequence[ClientState],
    cfg: TrainingConfig,
    schedule: DropoutSchedule,
    master_seed: int,
    global_test: Dataset | None = None,
    workers: int = 1,
    label: str | None = None,
    per_client_records: bool = True,
) -> tuple[ServerState, list[ClientState], list[MetricsRecord]]:
    """One synchronous round: select, broadcast, train locally, aggregate."""
    online = availability(schedule, server.round) & {c.id for c in clients if c.available}
    selected = select_clients(online, cfg.clients_per_round, master_seed, server.round)
    trained = _train_selected(server, clients, selected, cfg, master_seed, workers)
    by_id = {c.id: c for c in clients}
    new_clients = [replace(c, params=trained[c.id]) if c.id in trained else c for c in clients]
    if trained:
        new_global = aggregate({k: (p, float(len(by_id[k].train))) for k, p in trained.items()})
    else:
        new_global = server.global_params
    pulled = dict(server.pulled)
    pulled.update({k: server.version for k in selected})
    new_server = ServerState(new_global, server.round + 1, server.version + (1 if trained else 0), pulled)
    recs = _round_records(new_server, new_clients, global_test, label or cfg.strategy, per_client_records)
    return new_server, new_clients, recs


def run_round_async(
    server: ServerState,
    clients: Sequence[ClientState],
    cfg: TrainingConfig,
    schedule: DropoutSchedule,
    master_seed: int,
    global_test: Dataset | None = None,
    workers: int = 1,
    label: str | None = None,
    per_client_records: bool = True,
) -> tuple[ServerState, list[ClientState], list[MetricsRecord]]:
    """One asynchronous round.

    Every selected client pulls the current model, then updates arrive in a
    seeded random order and are mixed in one at a time with weight
    ``eta0 / (1 + staleness)``, staleness counting the server updates applied
    since that client pulled.
    """
    online = availability(schedule, server.round) & {c.id for c in clients if c.available}
    selected = select_clients(online, cfg.clients_per_round, master_seed, server.round)
    trained = _train_selected(server, clients, selected, cfg, master_seed, workers)
    pulled = dict(server.pulled)
    pulled.update({k: server.version for k in selected})
    order = stream(master_seed, server.round, TAG_ARRIVAL).permutation(list(selected)) if selected else []
    params, version = server.global_params, server.version
    for k in order:
        k = int(k)
        params = async_mix(params, trained[k], version - pulled[k], cfg.eta0)
        version += 1
    new_clients = [replace(c, params=trained[c.id]) if c.id in trained else c for c in clients]
    new_server = ServerState(params, server.round + 1, version, pulled)
    recs = _round_records(new_server, new_clients, global_test, label or cfg.strategy, per_client_records)
    return new_server, new_clients, recs


RoundHook = Callable[[ServerState, list[ClientState]], list[MetricsRecord]]


def run_federation(
    init_params: ParamSet,
    clients: Sequence[ClientState],
    cfg: TrainingConfig,
    schedule: DropoutSchedule,
    master_seed: int,
    global_test: Dataset | None = None,
    workers: int = 1,
    label: str | None = None,
    per_client_records: bool = True,
    after_round: RoundHook | None = None,
) -> tuple[ServerState, list[ClientState], list[MetricsRecord]]:
    """Run ``cfg.rounds`` rounds; ``after_round`` may add records after each."""
    server = ServerState(init_params)
    clients = list(clients)
    step = run_round_async if cfg.async_mode else run_round_sync
    records: list[MetricsRecord] = []
    for _ in range(cfg.rounds):
        server, clients, recs = step(
            server, clients, cfg, schedule, master_seed, global_test, workers, label, per_client_records
        )
        records += recs
        if after_round is not None:
            records += after_round(server, clients)
    return server, clients, records


def train_local_baseline(
    init_params: ParamSet,
    clients: Sequence[ClientState],
    cfg: TrainingConfig,
    master_seed: int,
    global_test: Dataset | None = None,
    label: str = "local",
) -> tuple[dict[int, ParamSet], list[MetricsRecord]]:
    """Every client trains alone from the shared initialisation.

    Training runs in ``cfg.rounds`` chunks of ``cfg.local_epochs`` epochs so
    compute matches the federated runs; one set of records is emitted per
    chunk.  The ``global`` record is the mean of the local models' accuracy
    on the global test set.
    """
    cfg = replace(cfg, strategy="local")
    models = {c.id: init_params for c in clients}
    records: list[MetricsRecord] = []
    for r in range(cfg.rounds):
        accs = []
        for c in clients:
            if not len(c.train):
                continue
            models[c.id] = local_train(
                models[c.id], c.train, cfg, stream(master_seed, c.id, r, TAG_LOCAL),
                context=f"local baseline, client {c.id}",
            )
            records += accuracy_records(models[c.id], c.test, r + 1, label, str(c.id))
            if global_test is not None:
                accs.append(evaluate(models[c.id], global_test)[0])
        if accs:
            records.append(MetricsRecord(r + 1, label, "global", "test", "accuracy", float(np.mean(accs))))
    return models, records
