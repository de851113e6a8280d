# tests/test_aggregation.py
import math

import numpy as np
import pytest

from app.errors import ProtocolError
from app.services.aggregation import (
    aggregate_cluster_prototypes,
    aggregate_discriminators,
    aggregate_generated_cluster_features,
    apply_local_correction,
    compute_generated_means,
    compute_local_prototypes,
    compute_mi_weights,
    fedavg,
    group_mean_matrix,
    normalize_mi_weights,
)
from app.services.networks import DiscriminatorParams, GeneratorParams, generator_forward
from app.services.numerics import softmax
from app.services.state import ClusterState, PrototypeSet, fresh_optimizer


def _filled(bundle, value):
    return type(bundle).from_arrays({n: np.full_like(v, value) for n, v in bundle.arrays().items()})


def _disc(seed=0, feature_dim=4, num_classes=3):
    return DiscriminatorParams.init(feature_dim, num_classes, np.random.default_rng(seed), hidden=5)


def _cluster(members, disc=None):
    disc = disc or _disc()
    return ClusterState(cluster_id=0, members=list(members), discriminator=disc,
                        discriminator_opt=fresh_optimizer(disc, 0.01))


def test_group_mean_is_centroid():
    feats = np.array([[0.0, 0.0], [4.0, 4.0], [9.0, 9.0]])
    labels = np.array([1, 1, 0])
    mask = np.array([True, True, False])
    matrix = group_mean_matrix(labels, mask, [1])
    np.testing.assert_array_equal(matrix @ feats, [[2.0, 2.0]])


def test_local_prototypes_match_direct_mean(client):
    _, feats = generator_forward(client.generator, client.graph)
    protos = compute_local_prototypes(client)
    graph = client.graph
    for h in range(client.num_classes):
        rows = feats.values[graph.train_mask & (graph.labels == h)]
        np.testing.assert_allclose(protos.vectors[h], rows.mean(axis=0), atol=1e-12)
    np.testing.assert_array_equal(protos.counts, client.class_counts)


def test_generated_means_are_probability_weighted(client):
    logits, feats = generator_forward(client.generator, client.graph)
    probs = softmax(logits).values
    generated = compute_generated_means(client)
    for h in range(client.num_classes):
        expected = (probs[:, h:h + 1] * feats.values).sum(axis=0) / probs[:, h].sum()
        np.testing.assert_allclose(generated.vectors[h], expected, atol=1e-12)


def test_cluster_prototype_weighted_mean_example():
    a = PrototypeSet(np.array([[0.0]]), np.array([1]))
    b = PrototypeSet(np.array([[4.0]]), np.array([3]))
    assert aggregate_cluster_prototypes([a, b]).vectors[0, 0] == 3.0
    assert aggregate_generated_cluster_features([a, b]).vectors[0, 0] == 3.0


@pytest.mark.parametrize("seed", range(10))
def test_cluster_prototypes_match_direct_summation(seed):
    rng = np.random.default_rng(seed)
    sets = [PrototypeSet(rng.standard_normal((4, 3)), rng.integers(0, 5, size=4)) for _ in range(3)]
    sets[0].counts[0] = 2
    out = aggregate_cluster_prototypes(sets)
    for h in range(4):
        total = sum(int(s.counts[h]) for s in sets)
        if total == 0:
            assert not out.defined[h]
            continue
        expected = sum(s.counts[h] * s.vectors[h] for s in sets) / total
        np.testing.assert_allclose(out.vectors[h], expected, atol=1e-12)


def test_single_member_cluster_keeps_prototypes():
    only = PrototypeSet(np.array([[1.5, -2.0], [0.0, 0.0]]), np.array([4, 0]))
    out = aggregate_cluster_prototypes([only])
    np.testing.assert_array_equal(out.vectors, only.vectors)
    assert list(out.classes) == [0]


def test_prototype_aggregation_without_members():
    with pytest.raises(ProtocolError):
        aggregate_cluster_prototypes([])


def test_mi_weight_normalization():
    raw, clipped = normalize_mi_weights({0: 0.1, 1: 0.3}, 0.5)
    assert raw == pytest.approx({0: 0.5, 1: 1.5})
    assert clipped == pytest.approx({0: 0.5, 1: 1.5})
    _, tight = normalize_mi_weights({0: 0.1, 1: 0.3}, 0.2)
    assert tight == pytest.approx({0: 0.8, 1: 1.2})


def test_mi_weights_mean_one_before_clipping():
    rng = np.random.default_rng(2)
    mi = {m: float(v) for m, v in enumerate(rng.random(6))}
    raw, clipped = normalize_mi_weights(mi, 0.5)
    assert math.fsum(raw.values()) / len(raw) == pytest.approx(1.0, abs=1e-12)
    assert all(0.5 <= w <= 1.5 for w in clipped.values())


def test_zero_mi_falls_back_to_unit_weights():
    raw, clipped = normalize_mi_weights({3: 0.0, 5: 0.0}, 0.5)
    assert raw == {3: 1.0, 5: 1.0} and clipped == {3: 1.0, 5: 1.0}


def test_identical_posteriors_give_unit_weights():
    protos = PrototypeSet(np.random.default_rng(0).standard_normal((3, 4)), np.array([5, 2, 1]))
    cluster = _cluster([0, 1])
    cluster.member_prototypes = {0: protos, 1: protos}
    cluster.generated = protos
    mi, weights, posterior = compute_mi_weights(cluster, 0.5)
    assert mi == pytest.approx({0: 0.0, 1: 0.0}, abs=1e-12)
    assert weights == {0: 1.0, 1: 1.0}
    assert posterior.sum() == pytest.approx(1.0, abs=1e-12)


def test_mi_weights_do_not_depend_on_member_order():
    rng = np.random.default_rng(1)
    sets = {m: PrototypeSet(rng.standard_normal((3, 4)), np.array([3, 2, 1])) for m in range(3)}
    generated = PrototypeSet(rng.standard_normal((3, 4)), np.array([9, 6, 3]))
    forward = _cluster([0, 1, 2])
    forward.member_prototypes = dict(sets)
    forward.generated = generated
    backward = _cluster([2, 1, 0])
    backward.member_prototypes = {m: sets[m] for m in (2, 1, 0)}
    backward.generated = generated
    assert compute_mi_weights(forward, 0.5)[:2] == compute_mi_weights(backward, 0.5)[:2]


def test_mi_weights_require_generated_features():
    with pytest.raises(ProtocolError):
        compute_mi_weights(_cluster([0]), 0.5)


def test_correction_scales_all_generator_tensors(client):
    corrected = apply_local_correction(client, 0.9, 0.5)
    for name in client.generator.names():
        np.testing.assert_allclose(corrected.generator[name].values, 0.9 * client.generator[name].values,
                                   atol=1e-15)
    assert corrected.generator_opt is client.generator_opt


def test_correction_on_scalar_example(client):
    arrays = client.generator.arrays()
    arrays["classifier.bias"] = np.array([2.0, -4.0, 0.0])
    client.generator = GeneratorParams.from_arrays(arrays)
    corrected = apply_local_correction(client, 0.9)
    np.testing.assert_allclose(corrected.generator["classifier.bias"].values, [1.8, -3.6, 0.0], atol=1e-15)


def test_correction_inverse_restores(client):
    restored = apply_local_correction(apply_local_correction(client, 1.3), 1 / 1.3)
    for name in client.generator.names():
        np.testing.assert_allclose(restored.generator[name].values, client.generator[name].values, atol=1e-12)
    assert apply_local_correction(client, 1.0).generator.equals(client.generator)


def test_correction_rejects_bad_weights(client):
    with pytest.raises(ProtocolError):
        apply_local_correction(client, float("nan"))
    with pytest.raises(ProtocolError):
        apply_local_correction(client, 1.7, 0.5)


def test_discriminator_aggregation_example():
    base = _disc()
    a = _cluster([0, 1, 2], _filled(base, 1.0))
    b = _cluster([3], _filled(base, 5.0))
    merged = aggregate_discriminators([a, b], 4)
    for name in merged.names():
        np.testing.assert_array_equal(merged[name].values, np.full_like(base[name].values, 2.0))


def test_single_cluster_discriminator_passes_through():
    disc = _disc(seed=3)
    merged = aggregate_discriminators([_cluster([0, 1], disc)], 2)
    assert merged.equals(disc)


def test_discriminator_weights_must_cover_all_clients():
    with pytest.raises(ProtocolError):
        aggregate_discriminators([_cluster([0, 1])], 3)


def test_fedavg_example_skips_adapter():
    base = GeneratorParams.init(3, 2, np.random.default_rng(0), hidden=4, feature_dim=2)
    averaged = fedavg([_filled(base, 1.0), _filled(base, 3.0)], [100, 300])
    assert set(averaged) == set(GeneratorParams.BACKBONE_AND_HEAD)
    for values in averaged.values():
        np.testing.assert_allclose(values, 2.5, atol=1e-15)
    with pytest.raises(ProtocolError):
        fedavg([base], [0])
