import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmem.datasets import Dataset, make_blobs
from fedmem.errors import ConfigurationError, InterpolationError, SemanticError
from fedmem.generator import NoiseSpec, SemanticTable, init_generator
from fedmem.numerics import init_mlp
from fedmem.personalization import (
    PersonalizationConfig,
    dropout_histogram,
    interpolate,
    localize_global,
    personalize,
    synthesize_for_client,
    train_friend_model,
)
from fedmem.protocol import TrainingConfig, evaluate

A = SemanticTable({c: np.eye(4)[c] * 3 for c in range(4)}, seen=[0, 1, 2], unseen=[3])
OMEGA = init_generator(2, 4, 4, hidden=(8,), seed=0)
NOISE = NoiseSpec(2)


def test_single_class_histogram():
    ds = synthesize_for_client(OMEGA, [0, 5, 0, 0], 30, A, NOISE, 0)
    assert np.all(ds.labels == 1) and len(ds) == 30


def test_uniform_histogram_exact_split():
    ds = synthesize_for_client(OMEGA, [1, 1, 1, 1], 100, A, NOISE, 0)
    assert np.bincount(ds.labels).tolist() == [25, 25, 25, 25]


def test_three_to_one_histogram():
    ds = synthesize_for_client(OMEGA, [3, 1, 0, 0], 100, A, NOISE, 0)
    assert np.bincount(ds.labels, minlength=4).tolist() == [75, 25, 0, 0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=4, max_size=4).filter(lambda h: sum(h) > 0), st.integers(20, 300))
def test_histogram_fidelity(hist, budget):
    present = sum(1 for h in hist if h)
    ds = synthesize_for_client(OMEGA, hist, budget, A, NOISE, 1)
    got = np.bincount(ds.labels, minlength=4)
    target = budget * np.asarray(hist) / sum(hist)
    assert got.sum() == budget
    assert all(got[c] >= 1 for c in range(4) if hist[c])
    if budget >= 4 * present:
        assert np.all(np.abs(got - target) < 1 + 1e-9)


def test_budget_below_present_classes():
    with pytest.raises(ConfigurationError):
        synthesize_for_client(OMEGA, [1, 1, 1, 0], 2, A, NOISE, 0)


def test_missing_embedding():
    small = SemanticTable({0: [1.0, 0, 0, 0]}, seen=[0])
    with pytest.raises(SemanticError):
        synthesize_for_client(OMEGA, [1, 1], 10, small, NOISE, 0)


def test_interpolation_endpoints_and_midpoint():
    a, b = init_mlp([3, 4, 2], seed=0), init_mlp([3, 4, 2], seed=1)
    assert interpolate(a, b, 1.0).equals(a)
    assert interpolate(a, b, 0.0).equals(b)
    from fedmem.numerics import Layer, ParamSet

    two = ParamSet([Layer("l", np.array([[2.0]]), np.array([2.0]), "linear")])
    four = ParamSet([Layer("l", np.array([[4.0]]), np.array([4.0]), "linear")])
    assert interpolate(two, four, 0.5).flatten().tolist() == [3.0, 3.0]


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_interpolation_affine_in_beta(b1, b2):
    a, b = init_mlp([2, 3], seed=0), init_mlp([2, 3], seed=1)
    lhs = interpolate(a, b, b1).flatten() - interpolate(a, b, b2).flatten()
    rhs = (b1 - b2) * (a.flatten() - b.flatten())
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_interpolation_errors():
    with pytest.raises(InterpolationError):
        interpolate(init_mlp([2, 3], seed=0), init_mlp([2, 4], seed=0), 0.5)
    with pytest.raises(InterpolationError):
        interpolate(init_mlp([2, 3], seed=0), init_mlp([2, 3], seed=0), 1.5)


def _blobs_friend_setup():
    ds = make_blobs(3, 4, 100, 0.5, layout_seed=0, sample_seed=0)
    return ds


def test_friend_fits_separated_synthetic_blobs():
    ds = _blobs_friend_setup()
    cfg = PersonalizationConfig(friend_epochs=60, friend_learning_rate=5e-3)
    friend = train_friend_model(ds, init_mlp([4, 16, 3], seed=0), cfg, 0)
    assert evaluate(friend.params, ds)[0] >= 0.95
    assert friend.label_counts.tolist() == [100, 100, 100]


def test_friend_zero_epochs_near_chance():
    ds = _blobs_friend_setup()
    accs = [evaluate(train_friend_model(ds, init_mlp([4, 16, 3], seed=s), PersonalizationConfig(friend_epochs=0), 0).params, ds)[0]
            for s in range(10)]
    assert abs(np.mean(accs) - 1 / 3) < 0.25


def test_friend_deterministic():
    ds = _blobs_friend_setup()
    cfg = PersonalizationConfig(friend_epochs=3)
    a = train_friend_model(ds, init_mlp([4, 8, 3], seed=0), cfg, 4)
    b = train_friend_model(ds, init_mlp([4, 8, 3], seed=0), cfg, 4)
    assert a.params.equals(b.params)


def test_localize_zero_epochs_and_empty_shard():
    g = init_mlp([4, 8, 3], seed=0)
    ds = _blobs_friend_setup()
    assert localize_global(g, ds, TrainingConfig(local_epochs=0), 0).equals(g)
    empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), 3)
    with pytest.warns(UserWarning):
        assert localize_global(g, empty, TrainingConfig(), 0) is g


def test_localize_does_not_hurt_on_own_shard():
    g = init_mlp([4, 8, 3], seed=0)
    ds = _blobs_friend_setup()
    cfg = TrainingConfig(local_epochs=10, learning_rate=5e-3)
    assert evaluate(localize_global(g, ds, cfg, 0), ds)[0] >= evaluate(g, ds)[0]


def test_dropout_histogram_mixes_seen_classes():
    h = dropout_histogram([0, 0, 0, 40], A, 1.0)
    assert h.tolist()[3] == 40 and h[:3].sum() == pytest.approx(40.0)


def test_personalize_endpoints():
    ds = _blobs_friend_setup()
    base = init_mlp([4, 8, 3], seed=5)
    A3 = SemanticTable({c: ds.class_means[c] for c in range(3)}, seen=[0, 1, 2])
    omega = init_generator(2, 4, 4, hidden=(8,), seed=0)
    cfg1 = PersonalizationConfig(beta=1.0, friend_epochs=2, budget=30)
    cfg0 = PersonalizationConfig(beta=0.0, friend_epochs=2, budget=30)
    init = init_mlp([4, 8, 3], seed=9)
    p1 = personalize("non_dropout", base, ds, omega, A3, init, cfg1, NOISE, 0)
    assert p1.params.equals(base)
    p0 = personalize("non_dropout", base, ds, omega, A3, init, cfg0, NOISE, 0)
    assert p0.params.equals(p0.friend.params)
    d0 = personalize("dropout", base, ds, omega, A3, init, cfg0, NOISE, 0, TrainingConfig(local_epochs=1))
    assert d0.params.equals(d0.friend.params)


def test_unknown_mode():
    with pytest.raises(ConfigurationError):
        personalize("sometimes", init_mlp([4, 3], seed=0), _blobs_friend_setup(), OMEGA, A,
                    init_mlp([4, 3], seed=0), PersonalizationConfig(), NOISE, 0)
