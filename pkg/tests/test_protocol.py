from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from conftest import scalar_aggregate
from fedmem.datasets import make_blobs, split_train_test
from fedmem.errors import AggregationError, ConfigurationError
from fedmem.numerics import init_mlp
from fedmem.partitioning import DropoutSchedule, PartitionSpec, assign_test_slices, partition
from fedmem.protocol import (
    ClientState,
    ServerState,
    TrainingConfig,
    aggregate,
    async_mix,
    evaluate,
    local_train,
    run_federation,
    run_round_async,
    run_round_sync,
    select_clients,
    staleness_weight,
    train_local_baseline,
)

FAST = TrainingConfig(local_epochs=2, batch_size=16, learning_rate=5e-3, rounds=3)


def _clients(K=3, seed=0):
    ds = make_blobs(4, 3, 40, 1.0, layout_seed=1, sample_seed=seed)
    tr, te = split_train_test(ds, 0.2, 0)
    sh = partition(tr, PartitionSpec("dirichlet", K, seed, alpha=0.5))
    sl = assign_test_slices(tr, sh, te)
    return [ClientState(k, tr.subset(sh[k]), te.subset(sl[k])) for k in range(K)], te


def test_select_full_participation_is_sorted_pool():
    assert select_clients({3, 1, 2}, None, 0, 0) == (1, 2, 3)


def test_select_uniformity():
    # 1000 draws of one client out of 5: each count ~ Binomial(1000, 0.2), sd 12.6
    counts = Counter(select_clients(set(range(5)), 1, 7, r)[0] for r in range(1000))
    assert all(140 <= counts[k] <= 260 for k in range(5))


def test_select_empty_pool_warns():
    assert select_clients(set(), 2, 0, 0) == ()


def test_aggregate_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        ps = [init_mlp([2, 3, 2], seed=int(rng.integers(1 << 30))) for _ in range(n)]
        ws = rng.uniform(0.1, 5, size=n)
        ids = rng.permutation(50)[:n]
        got = aggregate({int(k): (p, float(w)) for k, p, w in zip(ids, ps, ws)}).flatten()
        want = scalar_aggregate([(int(k), list(p.flatten()), float(w)) for k, p, w in zip(ids, ps, ws)])
        assert np.max(np.abs(got - np.array(want))) < 1e-10


def test_aggregate_layout_mismatch_names_client():
    a, b = init_mlp([2, 3], seed=0), init_mlp([2, 4], seed=0)
    with pytest.raises(AggregationError, match="7"):
        aggregate({1: (a, 1.0), 7: (b, 1.0)})


def test_aggregate_identical_models_is_identity():
    p = init_mlp([3, 3], seed=2)
    assert np.allclose(aggregate({0: (p, 1.0), 1: (p, 3.0)}).flatten(), p.flatten(), rtol=0, atol=1e-15)


def test_local_train_zero_epochs_is_identity():
    clients, _ = _clients()
    p = init_mlp([3, 8, 4], seed=0)
    assert local_train(p, clients[0].train, replace(FAST, local_epochs=0), np.random.default_rng(0)) is p


def test_local_train_reduces_loss():
    clients, _ = _clients()
    p = init_mlp([3, 8, 4], seed=0)
    q = local_train(p, clients[0].train, replace(FAST, local_epochs=30), np.random.default_rng(0))
    assert evaluate(q, clients[0].train)[0] > evaluate(p, clients[0].train)[0]


def test_fedprox_mu_zero_bit_identical_to_fedavg():
    clients, te = _clients()
    init = init_mlp([3, 8, 4], seed=1)
    sched = DropoutSchedule(3)
    a, _, _ = run_federation(init, clients, FAST, sched, 5, te)
    b, _, _ = run_federation(init, clients, replace(FAST, strategy="fedprox", mu=0.0), sched, 5, te)
    assert a.global_params.equals(b.global_params)


def test_fedprox_positive_mu_differs():
    clients, te = _clients()
    init = init_mlp([3, 8, 4], seed=1)
    a, _, _ = run_federation(init, clients, FAST, DropoutSchedule(3), 5)
    b, _, _ = run_federation(init, clients, replace(FAST, strategy="fedprox", mu=1.0), DropoutSchedule(3), 5)
    assert not a.global_params.equals(b.global_params)


def test_single_client_round_adopts_its_params():
    clients, _ = _clients()
    init = init_mlp([3, 8, 4], seed=1)
    lone = [replace(clients[0], id=0)]
    server, new_clients, _ = run_round_sync(ServerState(init), lone, FAST, DropoutSchedule(1), 3)
    assert server.global_params.equals(new_clients[0].params)


def test_dropout_clients_never_train():
    clients, te = _clients()
    init = init_mlp([3, 8, 4], seed=1)
    _, final, _ = run_federation(init, clients, FAST, DropoutSchedule(3, frozenset({2}), 0), 0, te)
    assert final[2].params is None and final[0].params is not None


def test_records_one_global_accuracy_per_round():
    clients, te = _clients()
    _, _, recs = run_federation(init_mlp([3, 8, 4], seed=1), clients, FAST, DropoutSchedule(3), 0, te)
    glob = [r for r in recs if r.client_id == "global" and r.metric == "accuracy"]
    assert [r.round for r in glob] == [1, 2, 3]


def test_workers_do_not_change_results():
    clients, te = _clients()
    init = init_mlp([3, 8, 4], seed=1)
    a, _, ra = run_federation(init, clients, FAST, DropoutSchedule(3), 9, te, workers=1)
    b, _, rb = run_federation(init, clients, FAST, DropoutSchedule(3), 9, te, workers=3)
    assert a.global_params.equals(b.global_params) and ra == rb


def test_staleness_weight_and_mix():
    assert staleness_weight(0, 0.5) == 0.5
    assert staleness_weight(3, 0.5) == pytest.approx(0.125)
    g, c = init_mlp([2, 2], seed=0), init_mlp([2, 2], seed=1)
    mixed = async_mix(g, c, 1, 0.5)
    np.testing.assert_allclose(mixed.flatten(), 0.75 * g.flatten() + 0.25 * c.flatten(), rtol=0, atol=1e-15)
    assert async_mix(g, c, 0, 1.0).equals(c)


def test_async_round_runs_and_counts_versions():
    clients, te = _clients()
    cfg = replace(FAST, async_mode=True, rounds=1)
    server, _, _ = run_round_async(ServerState(init_mlp([3, 8, 4], seed=1)), clients, cfg, DropoutSchedule(3), 0, te)
    assert server.version == 3 and server.round == 1


def test_evaluate_per_class_marks_absent_classes():
    clients, _ = _clients()
    ds = clients[0].test
    acc, pc = evaluate(init_mlp([3, 8, 4], seed=1), ds)
    missing = set(range(4)) - set(ds.labels.tolist())
    assert all(np.isnan(pc[c]) for c in missing)
    assert 0.0 <= acc <= 1.0


def test_local_baseline_uses_no_aggregation():
    clients, te = _clients()
    init = init_mlp([3, 8, 4], seed=1)
    models, recs = train_local_baseline(init, clients, FAST, 0, te)
    solo = init
    for r in range(FAST.rounds):
        from fedmem.protocol import TAG_LOCAL, stream

        solo = local_train(solo, clients[1].train, replace(FAST, strategy="local"), stream(0, 1, r, TAG_LOCAL))
    assert models[1].equals(solo)
    assert {r.strategy for r in recs} == {"local"}


def test_training_config_validation():
    with pytest.raises(ConfigurationError):
        TrainingConfig(strategy="scaffold")
    with pytest.raises(ConfigurationError):
        TrainingConfig(learning_rate=0)
