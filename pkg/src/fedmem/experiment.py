"""End-to-end experiment orchestration.

One call to :func:`run_seed` builds the data for a seed, partitions it,
runs every configured strategy and returns the metric records together with
the artifacts the ``personalize`` subcommand writes to disk.

Strategy labels that appear in the CSV:

``local``        clients train alone; ``global`` is the mean over local models
``fedavg``       the global model, per round
``fedavg_ft``    the final global model fine-tuned on each client's data
``fedprox``      proximal local objective
``apfl``         global rows come from the FedAvg backbone; per-client rows
                 at the final round are the personalized models
``apfl_friend``  the friend models on their own
``setup``        one ``dropout`` flag (1 or 0) per client at round 0
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datasets import Dataset, load_csv, make_blobs, split_train_test
from .errors import ConfigurationError, FedMemError, TrainingError
from .generator import (
    ClassProportionTable,
    SemanticTable,
    init_generator,
    train_generator,
)
from .metrics import MetricsRecord, canonical_order, write_csv
from .numerics import AdamState, ParamSet, init_mlp
from .partitioning import ClientShards, assign_test_slices, partition
from .personalization import localize_global, personalize
from .protocol import (
    ClientState,
    ServerState,
    accuracy_records,
    run_federation,
    stream,
    train_local_baseline,
)

log = logging.getLogger(__name__)

SERVER = 1 << 20  # stream key slot used for server-side randomness
TAG_INIT = 10
TAG_GENERATOR = 11
TAG_PERSONALIZE = 12

SWEEP_AXES = ("noise_dim", "n_s", "alpha", "beta", "embedding_table")


@dataclass
class SeedData:
    full: Dataset
    train: Dataset
    test: Dataset
    shards: ClientShards
    test_slices: ClientShards
    clients: list[ClientState]


@dataclass
class SeedResult:
    records: list[MetricsRecord]
    global_params: ParamSet | None = None
    omega: ParamSet | None = None
    personalized: dict[int, ParamSet] = field(default_factory=dict)


def _int_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def build_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    spec = cfg.dataset
    if spec.kind == "blobs":
        full = make_blobs(spec.num_classes, spec.dim, spec.n_per_class, spec.spread, spec.layout_seed, seed)
    else:
        full = load_csv(spec.path)
    train, test = split_train_test(full, cfg.test_fraction, cfg.split_seed)
    shards = partition(train, cfg.partition_spec(seed))
    slices = assign_test_slices(train, shards, test)
    clients = [
        ClientState(k, train.subset(shards[k]), test.subset(slices[k])) for k in range(cfg.clients)
    ]
    return SeedData(full, train, test, shards, slices, clients)


def semantic_table(cfg: ExperimentConfig, data: SeedData, seen) -> SemanticTable:
    C = data.full.num_classes
    unseen = sorted(set(range(C)) - set(seen))
    if cfg.semantic.source == "file":
        table = SemanticTable.load(cfg.semantic.path)
    else:
        if data.full.class_means is None:
            raise ConfigurationError("semantic.source: class_means requires a blobs dataset")
        table = SemanticTable.from_class_means(data.full.class_means, dim=cfg.semantic.dim, seed=cfg.semantic.seed)
    return table.with_split(seen, unseen)


def _fingerprint(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def backbone_key(cfg: ExperimentConfig, seed: int) -> str:
    """Everything the FedAvg backbone depends on; sweep axes that only touch
    the generator or personalization leave it unchanged."""
    d = cfg.to_dict()
    keep = {k: d[k] for k in (
        "dataset", "test_fraction", "split_seed", "partition_mode", "clients", "alpha", "gamma",
        "monopoly_client", "monopoly_classes", "dropout_clients", "dropout_round", "hidden", "training",
    )}
    keep["seed"] = seed
    return _fingerprint(keep)


@dataclass
class Backbone:
    init: ParamSet
    server: ServerState
    clients: list[ClientState]
    records: list[MetricsRecord]


def _run_backbone(cfg, data, seed, init, workers, cache, strategy="fedavg") -> Backbone:
    key = (backbone_key(cfg, seed), strategy)
    if cache is not None and key in cache:
        return cache[key]
    tcfg = replace(cfg.training, strategy=strategy)
    if strategy == "fedprox" and tcfg.mu == 0:
        log.warning("fedprox with mu = 0 reduces to fedavg")
    server, clients, recs = run_federation(
        init, data.clients, tcfg, cfg.schedule(), seed, data.test, workers, label=strategy,
    )
    bb = Backbone(init, server, clients, recs)
    if cache is not None:
        cache[key] = bb
    return bb


def _generator_records(history, round_: int) -> list[MetricsRecord]:
    out = []
    for name in ("loss_G", "L_cls", "L_div"):
        values = getattr(history, name)
        v = values[-1] if values else float("nan")
        out.append(MetricsRecord(round_, "apfl", "global", "train", name, v))
    return out


def _train_server_generator(cfg, data, seed, bb: Backbone, A: SemanticTable, alpha, d_out):
    """Train once on the final client models, or replay warm-started
    per-round training when ``retrain_each_round`` is set."""
    non_dropout = sorted(cfg.schedule().non_dropout)
    gcfg = cfg.generator
    omega = init_generator(
        cfg.noise.dim, A.dim, d_out, gcfg.hidden, seed=_int_seed(seed, SERVER, TAG_INIT, 1)
    )
    records: list[MetricsRecord] = []
    if gcfg.retrain_each_round:
        # Re-run the federation so the generator sees every intermediate round.
        state: AdamState | None = None
        models_by_round: list[dict[int, ParamSet]] = []

        def hook(server, clients):
            models_by_round.append({c.id: c.params for c in clients if c.id in non_dropout and c.params is not None})
            return []

        run_federation(
            bb.init, data.clients, replace(cfg.training, strategy="fedavg"), cfg.schedule(), seed,
            None, 1, label="fedavg", per_client_records=False, after_round=hook,
        )
        for r, models in enumerate(models_by_round, start=1):
            if not models:
                continue
            omega, state, hist = train_generator(
                omega, models, alpha, A, gcfg, cfg.noise, stream(seed, SERVER, r, TAG_GENERATOR), adam=state
            )
            records += _generator_records(hist, r)
        return omega, records
    models = {c.id: c.params for c in bb.clients if c.id in non_dropout and c.params is not None}
    if not models:
        raise TrainingError("no non-dropout client finished a round; cannot train the generator")
    omega, _, hist = train_generator(
        omega, models, alpha, A, gcfg, cfg.noise, stream(seed, SERVER, bb.server.round, TAG_GENERATOR)
    )
    records += _generator_records(hist, bb.server.round)
    return omega, records


def run_seed(cfg: ExperimentConfig, seed: int, workers: int | None = None, cache: dict | None = None) -> SeedResult:
    workers = cfg.workers if workers is None else workers
    data = build_data(cfg, seed)
    C, d = data.full.num_classes, data.full.dim
    init = init_mlp([d, *cfg.hidden, C], seed=_int_seed(seed, SERVER, TAG_INIT, 0))
    schedule = cfg.schedule()
    R = cfg.training.rounds
    recs: list[MetricsRecord] = [
        MetricsRecord(0, "setup", str(k), "train", "dropout", 1.0 if k in schedule.dropout_set else 0.0)
        for k in range(cfg.clients)
    ]
    result = SeedResult(recs)

    if "local" in cfg.strategies:
        _, local_recs = train_local_baseline(init, data.clients, cfg.training, seed, data.test)
        recs += local_recs

    if "fedprox" in cfg.strategies:
        recs += _run_backbone(cfg, data, seed, init, workers, cache, "fedprox").records

    need_backbone = "fedavg" in cfg.strategies or "apfl" in cfg.strategies
    if not need_backbone:
        return result
    bb = _run_backbone(cfg, data, seed, init, workers, cache, "fedavg")
    theta_star = bb.server.global_params
    result.global_params = theta_star

    if "fedavg" in cfg.strategies:
        recs += bb.records
        for c in data.clients:
            ft = localize_global(theta_star, c.train, cfg.training, np.random.default_rng([_personal_seed(seed, c.id), 2]))
            recs += accuracy_records(ft, c.test, R, "fedavg_ft", str(c.id), per_class=True)

    if "apfl" in cfg.strategies:
        recs += [replace(r, strategy="apfl") for r in bb.records if r.client_id == "global"]
        non_dropout = sorted(schedule.non_dropout)
        alpha = ClassProportionTable.from_shards(
            data.train, data.shards, non_dropout, cfg.generator.alpha_normalization
        )
        A = semantic_table(cfg, data, alpha.seen_classes())
        omega, gen_recs = _train_server_generator(cfg, data, seed, bb, A, alpha, d)
        recs += gen_recs
        result.omega = omega
        final = {c.id: c for c in bb.clients}
        for c in data.clients:
            dropped = c.id in schedule.dropout_set
            own = final[c.id].params
            if dropped:
                mode, base = "dropout", theta_star
            elif own is None:
                log.warning("client %d never trained; personalizing from the global model", c.id)
                mode, base = "non_dropout", theta_star
            else:
                mode, base = "non_dropout", own
            try:
                p = personalize(
                    mode, base, c.train, omega, A, init, cfg.personalization, cfg.noise,
                    _personal_seed(seed, c.id), localize_cfg=cfg.training,
                )
            except FedMemError as exc:
                raise type(exc)(f"personalizing client {c.id} (seed {seed}): {exc}") from None
            result.personalized[c.id] = p.params
            recs += accuracy_records(p.params, c.test, R, "apfl", str(c.id), per_class=True)
            recs += accuracy_records(p.friend.params, c.test, R, "apfl_friend", str(c.id), per_class=True)
    return result


def _personal_seed(seed: int, client_id: int) -> int:
    return _int_seed(seed, client_id, TAG_PERSONALIZE)


def collect_records(cfg: ExperimentConfig, workers: int | None = None, cache: dict | None = None) -> list[MetricsRecord]:
    out: list[MetricsRecord] = []
    for seed in cfg.seeds:
        run_id = cfg.run_id(seed)
        try:
            res = run_seed(cfg, seed, workers, cache)
        except FedMemError as exc:
            raise type(exc)(f"run {run_id}: {exc}") from None
        out += [r.stamped(run_id, seed) for r in res.records]
    return canonical_order(out)


def run_experiment(cfg: ExperimentConfig, out_path: str | Path, workers: int | None = None, cache: dict | None = None) -> Path:
    """Run every seed of ``cfg`` and write the canonical metrics CSV."""
    return write_csv(collect_records(cfg, workers, cache), out_path)


# -- sweeps -----------------------------------------------------------------

def parse_axis_value(axis: str, raw: str):
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"--axis: unknown axis {axis!r}; choose from {SWEEP_AXES}")
    try:
        if axis in ("noise_dim", "n_s"):
            return int(raw)
        if axis in ("alpha", "beta"):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"--values: {raw!r} is not valid for axis {axis}") from None
    return str(raw)


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Return ``cfg`` with one sweep coordinate changed, re-validated."""
    from .config import SemanticSpec, validate
    from .generator import GeneratorConfig, NoiseSpec
    from .personalization import PersonalizationConfig

    try:
        if axis == "noise_dim":
            new = replace(cfg, noise=NoiseSpec(int(value)))
        elif axis == "n_s":
            new = replace(cfg, generator=GeneratorConfig(**{**asdict(cfg.generator), "samples_per_class": int(value)}))
        elif axis == "alpha":
            if cfg.partition_mode != "dirichlet":
                raise ConfigurationError("the alpha axis needs a dirichlet partition")
            new = replace(cfg, alpha=float(value))
        elif axis == "beta":
            new = replace(cfg, personalization=PersonalizationConfig(**{**asdict(cfg.personalization), "beta": float(value)}))
        elif axis == "embedding_table":
            value = str(value)
            if value == "class_means":
                sem = SemanticSpec("class_means", None, cfg.semantic.seed)
            elif value.startswith("proj:"):
                sem = SemanticSpec("class_means", int(value[5:]), cfg.semantic.seed)
            else:
                if not Path(value).exists():
                    raise ConfigurationError(f"embedding_table: no such table file {value!r}")
                sem = SemanticSpec("file", None, cfg.semantic.seed, value)
            new = replace(cfg, semantic=sem)
        else:
            raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{axis}: {exc}") from None
    validate(new)
    tag = f"{cfg.tag}+" if cfg.tag else ""
    return replace(new, tag=f"{tag}{axis}={value}")


def sweep_records(
    cfg: ExperimentConfig, axis: str, values, workers: int | None = None, cache: dict | None = None
) -> list[MetricsRecord]:
    """One run block per value; FedAvg backbones are shared through ``cache``."""
    values = list(values)
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    variants = [apply_axis(cfg, axis, v) for v in values]
    cache = {} if cache is None else cache
    out: list[MetricsRecord] = []
    for v in variants:
        out += collect_records(v, workers, cache)
    return canonical_order(out)


def sweep(cfg: ExperimentConfig, axis: str, values, out_path: str | Path, workers: int | None = None) -> Path:
    return write_csv(sweep_records(cfg, axis, values, workers), out_path)
