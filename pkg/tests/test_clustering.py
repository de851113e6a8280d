# tests/test_clustering.py
import logging
import math

import numpy as np
import pytest

from app.errors import ConfigurationError
from app.services.clustering import (
    agglomerate,
    cluster_similarity,
    cosine,
    merge_representatives,
    pretrain_and_cluster,
)
from app.services.state import PrototypeSet
from tests.conftest import make_client, tiny_graph


def _rep(*rows, counts=None):
    vectors = np.array(rows, dtype=np.float64)
    counts = np.ones(len(rows), dtype=np.int64) if counts is None else np.array(counts)
    return PrototypeSet(vectors, counts)


def _pair_with_cosine(value):
    angle = math.acos(value)
    return _rep([1.0, 0.0]), _rep([math.cos(angle), math.sin(angle)])


def test_cosine_edge_cases():
    assert cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == 1.0
    assert cosine(np.zeros(2), np.array([1.0, 0.0])) == 0.0
    assert cosine(np.array([1.0, 1.0]), np.array([-1.0, -1.0])) == pytest.approx(-1.0)


def test_similarity_uses_shared_classes_only():
    a = _rep([1.0, 0.0], [0.0, 1.0], counts=[1, 1])
    b = _rep([1.0, 0.0], [1.0, 0.0], counts=[1, 0])
    assert cluster_similarity(a, b) == pytest.approx(1.0)
    c = _rep([1.0, 0.0], [1.0, 0.0], counts=[0, 1])
    assert cluster_similarity(b, c) is None


def test_merge_averages_shared_and_keeps_unique():
    a = _rep([2.0, 0.0], [5.0, 5.0], counts=[1, 0])
    b = _rep([0.0, 2.0], [1.0, 3.0], counts=[2, 4])
    merged = merge_representatives(a, b)
    np.testing.assert_array_equal(merged.vectors, [[1.0, 1.0], [1.0, 3.0]])
    np.testing.assert_array_equal(merged.counts, [3, 4])


def test_two_clients_merge_above_threshold():
    a, b = _pair_with_cosine(0.9)
    assert agglomerate([a, b], 0.8).num_clusters == 1
    assert agglomerate([a, b], 0.95).num_clusters == 2


def test_threshold_one_keeps_singletons():
    reps = [_rep([1.0, 0.0]) for _ in range(4)]
    assignment = agglomerate(reps, 1.0)
    assert assignment.labels == (0, 1, 2, 3)


def test_low_threshold_merges_everything():
    rng = np.random.default_rng(0)
    reps = [_rep(*rng.standard_normal((3, 4))) for _ in range(5)]
    assignment = agglomerate(reps, -0.99)
    assert assignment.num_clusters == 1
    assert assignment.labels == (0,) * 5


def test_labels_are_dense_and_ordered_by_smallest_member():
    reps = [_rep([1.0, 0.0]), _rep([0.0, 1.0]), _rep([1.0, 0.05]), _rep([0.05, 1.0])]
    assignment = agglomerate(reps, 0.9)
    assert assignment.labels == (0, 1, 0, 1)
    assert assignment.members(1) == [1, 3]


@pytest.mark.parametrize("seed", range(5))
def test_partition_is_invariant_to_client_order(seed):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((2, 3, 4))
    reps = [_rep(*(centers[i % 2] + 0.1 * rng.standard_normal((3, 4)))) for i in range(6)]
    perm = rng.permutation(6)
    base = agglomerate(reps, 0.5).partition()
    shuffled = agglomerate([reps[i] for i in perm], 0.5)
    relabelled = frozenset(frozenset(int(perm[m]) for m in group) for group in shuffled.partition())
    assert relabelled == base


def test_target_cluster_count_ignores_threshold():
    rng = np.random.default_rng(4)
    reps = [_rep(*rng.standard_normal((2, 3))) for _ in range(6)]
    assert agglomerate(reps, 1.0, target=2).num_clusters == 2
    assert agglomerate(reps, -0.99, target=4).num_clusters == 4


def test_disjoint_classes_stay_apart(caplog):
    a = _rep([1.0, 0.0], [0.0, 0.0], counts=[1, 0])
    b = _rep([0.0, 0.0], [1.0, 0.0], counts=[0, 1])
    with caplog.at_level(logging.WARNING, logger="app.services.clustering"):
        assert agglomerate([a, b], 0.0).num_clusters == 2
    assert "общих классов" in caplog.text
    assert agglomerate([a, b], 0.0, target=1).num_clusters == 1


def test_agglomerate_validation():
    with pytest.raises(ConfigurationError):
        agglomerate([], 0.5)
    with pytest.raises(ConfigurationError):
        agglomerate([_rep([1.0])], 1.5)
    with pytest.raises(ConfigurationError):
        agglomerate([_rep([1.0])], 0.5, target=2)


def test_pretrain_and_cluster_leaves_clients_untouched():
    clients = [make_client(tiny_graph(seed=m), 3, client_id=m) for m in range(3)]
    before = [c.generator.copy() for c in clients]
    assignment = pretrain_and_cluster(clients, 1.0, pre_epochs=2)
    assert assignment.labels == (0, 1, 2)
    for c, b in zip(clients, before):
        assert c.generator.equals(b)
