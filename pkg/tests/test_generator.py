import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference, max_rel_error, scalar_ce, scalar_cls_loss, scalar_div_loss, scalar_div_one_class, scalar_forward
from fedmem.datasets import make_blobs, split_train_test
from fedmem.errors import ConfigurationError, SemanticError
from fedmem.generator import (
    ClassProportionTable,
    GeneratorConfig,
    GeneratorObjective,
    NoiseSpec,
    SemanticTable,
    classification_loss,
    diversity_loss,
    diversity_loss_and_grad,
    generate,
    generator_loss,
    init_generator,
    sample_noise,
    train_generator,
)
from fedmem.numerics import init_mlp, params_to_bytes
from fedmem.partitioning import PartitionSpec, partition
from fedmem.protocol import TrainingConfig, local_train


def _table(C=3, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return SemanticTable({c: rng.normal(size=dim) for c in range(C)}, seen=range(C))


def test_noise_clt_and_determinism():
    z = sample_noise(100_000, NoiseSpec(3), 0)
    assert np.all(np.abs(z.mean(axis=0)) < 0.02)
    assert np.array_equal(z, sample_noise(100_000, NoiseSpec(3), 0))
    one = sample_noise(1, NoiseSpec(1), 5)
    assert one.shape == (1, 1) and np.isfinite(one[0, 0])


def test_generate_shape_and_determinism():
    A = _table()
    omega = init_generator(4, 2, 6, hidden=(8,), seed=1)
    Z = np.tile(sample_noise(1, NoiseSpec(4), 0), (2, 1))
    x = generate(omega, Z, [1, 1], A)
    assert x.shape == (2, 6) and np.array_equal(x[0], x[1])


def test_missing_embedding_names_class():
    A = _table(C=2)
    omega = init_generator(2, 2, 3, hidden=(4,), seed=0)
    with pytest.raises(SemanticError, match="5"):
        generate(omega, np.zeros((1, 2)), [5], A)


def test_generator_output_gradient_matches_finite_differences():
    A = _table()
    omega = init_generator(3, 2, 4, hidden=(5, 5), seed=2)
    Z = sample_noise(4, NoiseSpec(3), 1)
    labels = np.array([0, 1, 2, 1])
    from fedmem.numerics import backward_from_cache, forward_with_cache
    from fedmem.generator import generator_input

    cache = forward_with_cache(omega, generator_input(Z, labels, A))
    seed_grad = np.zeros_like(cache.result)
    seed_grad[2, 1] = 1.0
    g, _ = backward_from_cache(omega, cache, seed_grad)
    fd = central_difference(lambda w: generate(w, Z, labels, A)[2, 1], omega)
    assert max_rel_error(g.flatten(), fd) < 1e-5


def test_classification_single_client_reduces_to_mean_ce():
    model = init_mlp([3, 4, 3], seed=0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    y = np.array([0, 1, 2, 1, 0])
    alpha = ClassProportionTable((0,), np.ones((1, 3)))
    want = np.mean([scalar_ce(scalar_forward(model, list(r)), int(c)) for r, c in zip(x, y)])
    assert classification_loss(x, y, {0: model}, alpha) == pytest.approx(want, abs=1e-12)


def test_classification_zero_weights_is_zero():
    model = init_mlp([3, 4, 3], seed=0)
    alpha = ClassProportionTable((0,), np.zeros((1, 3)))
    assert classification_loss(np.ones((2, 3)), [0, 1], {0: model}, alpha) == 0.0


def test_classification_empty_clients():
    with pytest.raises(ConfigurationError):
        classification_loss(np.ones((1, 3)), [0], {}, ClassProportionTable((), np.zeros((0, 3))))


def test_classification_scalar_oracle_random():
    rng = np.random.default_rng(11)
    for trial in range(100):
        K, C, d, n = int(rng.integers(1, 4)), int(rng.integers(2, 4)), 3, int(rng.integers(1, 6))
        ids = sorted(rng.choice(20, K, replace=False).tolist())
        models = {k: init_mlp([d, 4, C], seed=int(rng.integers(1 << 30))) for k in ids}
        alpha = rng.uniform(0, 1, size=(K, C)) * (rng.uniform(size=(K, C)) > 0.3)
        x = rng.normal(size=(n, d)) * 2
        y = rng.integers(0, C, size=n)
        got = classification_loss(x, y, models, ClassProportionTable(tuple(ids), alpha))
        assert abs(got - scalar_cls_loss(x, y, models, alpha, ids)) < 1e-10


def test_two_client_hand_example():
    # identity classifiers so the logits are the inputs themselves
    from fedmem.numerics import Layer, ParamSet

    eye = ParamSet([Layer("l", np.eye(2), np.zeros(2), "linear")])
    swap = ParamSet([Layer("l", np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros(2), "linear")])
    x = np.array([[2.0, 0.0]])
    alpha = ClassProportionTable((0, 1), np.array([[0.3, 0.0], [0.2, 0.5]]))
    ce_eye = np.log(1 + np.exp(-2.0))   # logits (2, 0), label 0
    ce_swap = np.log(1 + np.exp(2.0))   # logits (0, 2), label 0
    assert classification_loss(x, [0], {0: eye, 1: swap}, alpha) == pytest.approx(0.3 * ce_eye + 0.2 * ce_swap, abs=1e-14)


def test_diversity_hand_values():
    assert diversity_loss(np.zeros((4, 3))) == 0.0
    assert diversity_loss(np.array([[0.0, 0.0], [3.0, 0.0]])) == -3.0
    with pytest.raises(ConfigurationError):
        diversity_loss(np.zeros((1, 2)))


def test_diversity_scalar_oracle_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, d = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        x = rng.normal(size=(n, d))
        assert abs(diversity_loss(x) - scalar_div_one_class(x.tolist())) < 1e-10
        labels = rng.integers(0, 3, size=n)
        got, _ = diversity_loss_and_grad(x, labels)
        assert abs(got - scalar_div_loss(x.tolist(), labels.tolist())) < 1e-10


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-100, 100)))
def test_diversity_non_positive(x):
    assert diversity_loss(x) <= 0.0


@pytest.mark.parametrize("c", [0.5, 2.0, 7.0])
def test_diversity_scales_linearly_at_two_samples(c):
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    assert diversity_loss(c * x) == pytest.approx(c * diversity_loss(x), rel=1e-14)


def test_diversity_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 3))
    labels = np.array([0, 0, 1, 1, 1, 2, 0])
    _, g = diversity_loss_and_grad(x, labels)
    h = 1e-6
    fd = np.zeros_like(x)
    for i in range(7):
        for j in range(3):
            up, dn = x.copy(), x.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd[i, j] = (diversity_loss_and_grad(up, labels)[0] - diversity_loss_and_grad(dn, labels)[0]) / (2 * h)
    assert np.max(np.abs(g - fd)) < 1e-7


def test_generator_loss_identities():
    assert generator_loss(2.0, -1.0, 0.5) == 0.5
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b, lam = rng.normal(), rng.normal(), rng.uniform()
        assert generator_loss(a, b, 1.0) == a
        assert generator_loss(a, b, 0.0) == b
        assert abs(generator_loss(a, b, lam) - (lam * a + (1 - lam) * b)) < 1e-10
    with pytest.raises(ConfigurationError):
        generator_loss(1.0, 1.0, 1.5)


def test_objective_gradient_matches_finite_differences():
    A = _table(C=3, dim=2)
    clients = {0: init_mlp([4, 5, 3], seed=1), 2: init_mlp([4, 5, 3], seed=2)}
    alpha = ClassProportionTable((0, 2), np.array([[0.2, 0.1, 0.0], [0.1, 0.3, 0.3]]))
    omega = init_generator(3, 2, 4, hidden=(5,), seed=4)
    Z = sample_noise(6, NoiseSpec(3), 2)
    y = np.array([0, 0, 1, 1, 2, 2])
    obj = GeneratorObjective(clients, alpha, A, 0.5)
    _, g = obj.value_and_grad(omega, Z, y)
    fd = central_difference(lambda w: obj.value_and_grad(w, Z, y)[0], omega)
    assert max_rel_error(g.flatten(), fd) < 1e-4


def test_proportion_table_from_shards():
    ds = make_blobs(4, 2, 20, 1.0)
    sh = partition(ds, PartitionSpec("pathological", 4, 0, gamma=1))
    alpha = ClassProportionTable.from_shards(ds, sh, [0, 1, 2])
    hist = sh.histograms(ds)[:3]
    np.testing.assert_allclose(alpha.alpha, hist / hist.sum(), rtol=0, atol=0)
    dropped_class = next(iter(sh.classes_of(ds, 3)))
    assert dropped_class not in alpha.seen_classes()
    per_class = ClassProportionTable.from_shards(ds, sh, [0, 1, 2], normalization="class")
    assert np.allclose(per_class.alpha.sum(axis=0)[per_class.seen_classes()], 1.0)


def test_semantic_table_json_and_disjointness(tmp_path):
    A = _table().with_split([0, 1], [2])
    back = SemanticTable.load(A.save(tmp_path / "a.json"))
    assert back.seen == {0, 1} and back.unseen == {2}
    assert all(np.array_equal(A.embeddings[c], back.embeddings[c]) for c in range(3))
    with pytest.raises(ConfigurationError):
        SemanticTable({0: [1.0]}, seen=[0], unseen=[0])


def test_generator_config_validation():
    with pytest.raises(ConfigurationError):
        GeneratorConfig(samples_per_class=1)
    with pytest.raises(ConfigurationError):
        GeneratorConfig(lam=-0.1)


def _trained_iid_clients():
    ds = make_blobs(4, 3, 150, 1.0, layout_seed=2, sample_seed=3)
    tr, _ = split_train_test(ds, 0.1, 0)
    sh = partition(tr, PartitionSpec("dirichlet", 2, 0, alpha=1e6))
    cfg = TrainingConfig(local_epochs=40, batch_size=32, learning_rate=5e-3)
    models = {k: local_train(init_mlp([3, 16, 4], seed=k), tr.subset(sh[k]), cfg, np.random.default_rng(k)) for k in range(2)}
    return ds, tr, sh, models


def test_zero_epochs_and_frozen_clients():
    ds, tr, sh, models = _trained_iid_clients()
    before = {k: params_to_bytes(m) for k, m in models.items()}
    A = SemanticTable.from_class_means(ds.class_means, seen=range(4))
    alpha = ClassProportionTable.from_shards(tr, sh, [0, 1])
    omega0 = init_generator(4, 3, 3, hidden=(16, 16), seed=0)
    same, _, hist = train_generator(omega0, models, alpha, A, GeneratorConfig(epochs=0, samples_per_class=10), NoiseSpec(4), 0)
    assert same.equals(omega0) and hist.loss_G == []
    train_generator(omega0, models, alpha, A, GeneratorConfig(epochs=1, samples_per_class=20), NoiseSpec(4), 0)
    assert all(params_to_bytes(models[k]) == before[k] for k in models)


def test_training_pulls_samples_toward_class_means():
    ds, tr, sh, models = _trained_iid_clients()
    A = SemanticTable.from_class_means(ds.class_means, seen=range(4))
    alpha = ClassProportionTable.from_shards(tr, sh, [0, 1])
    noise = NoiseSpec(4)
    omega0 = init_generator(4, 3, 3, hidden=(64, 64), seed=1)
    omega, _, _ = train_generator(omega0, models, alpha, A, GeneratorConfig(epochs=1), noise, 7)
    labels = np.repeat(np.arange(4), 300)
    Z = sample_noise(len(labels), noise, 99)

    def dist(w):
        x = generate(w, Z, labels, A)
        return np.mean([np.linalg.norm(x[labels == c].mean(axis=0) - ds.class_means[c]) for c in range(4)])

    assert dist(omega) < dist(omega0)
