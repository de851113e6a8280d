# app/services/aggregation.py
"""Прототипы, взвешенные средние, MI-веса и коррекция генераторов"""
import logging
import math
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from app.errors import ProtocolError
from app.services.losses import jensen_shannon_divergence
from app.services.networks import (
    DiscriminatorParams,
    GeneratorParams,
    discriminator_forward,
    generator_forward,
    weighted_average,
)
from app.services.numerics import Tensor, softmax
from app.services.state import ClientState, ClusterState, PrototypeSet

logger = logging.getLogger(__name__)


def group_mean_matrix(labels: np.ndarray, mask: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Матрица A (|classes|×N): A @ Z даёт средние строк Z по классам среди узлов маски"""
    matrix = np.zeros((len(classes), len(labels)))
    for row, c in enumerate(classes):
        members = np.flatnonzero(mask & (labels == c))
        if members.size:
            matrix[row, members] = 1.0 / members.size
    return matrix


def soft_assignment_matrix(probs: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Матрица B (|classes|×N): средние, взвешенные вероятностями классификатора"""
    weights = probs[:, list(classes)].T
    return weights / np.maximum(weights.sum(axis=1, keepdims=True), 1e-300)


def compute_local_prototypes(client: ClientState) -> PrototypeSet:
    """lp_m^h: центроид lz̃ по обучающим узлам класса h"""
    _, feats = generator_forward(client.generator, client.graph)
    counts = client.class_counts.copy()
    classes = np.flatnonzero(counts > 0)
    vectors = np.zeros((client.num_classes, feats.shape[1]))
    vectors[classes] = group_mean_matrix(client.graph.labels, client.graph.train_mask, classes) @ feats.values
    return PrototypeSet(vectors, counts)


def compute_generated_means(client: ClientState) -> PrototypeSet:
    """ĝ_m^h: средние lz̃ по всем узлам с весами softmax-вероятностей класса h"""
    logits, feats = generator_forward(client.generator, client.graph)
    probs = softmax(logits).values
    counts = client.class_counts.copy()
    classes = np.flatnonzero(counts > 0)
    vectors = np.zeros((client.num_classes, feats.shape[1]))
    vectors[classes] = soft_assignment_matrix(probs, classes) @ feats.values
    return PrototypeSet(vectors, counts)


def _count_weighted_mean(sets: Sequence[PrototypeSet]) -> PrototypeSet:
    if not sets:
        raise ProtocolError("Нет участников для агрегации прототипов")
    counts = np.zeros_like(sets[0].counts)
    for s in sets:
        counts = counts + s.counts
    vectors = np.zeros_like(sets[0].vectors)
    for h in np.flatnonzero(counts > 0):
        acc = np.zeros(vectors.shape[1])
        for s in sets:
            if s.counts[h] > 0:
                acc = acc + s.counts[h] * s.vectors[h]
        vectors[h] = acc / counts[h]
    return PrototypeSet(vectors, counts)


def aggregate_cluster_prototypes(member_prototypes: Sequence[PrototypeSet]) -> PrototypeSet:
    """cp_k^h = Σ |D_m^h| lp_m^h / Σ |D_m^h|; классы без данных не определены"""
    return _count_weighted_mean(member_prototypes)


def aggregate_generated_cluster_features(member_generated: Sequence[PrototypeSet]) -> PrototypeSet:
    """cz̃_k^h: то же взвешивание по |D_m^h|, применённое к ĝ"""
    return _count_weighted_mean(member_generated)


def class_posterior(disc: DiscriminatorParams, prototypes: PrototypeSet) -> np.ndarray:
    """Σ_h w_h D_k(строка_h) с частотами классов w_h"""
    rows = prototypes.rows()
    if rows.shape[0] == 0:
        raise ProtocolError("Апостериорное распределение без определённых классов")
    probs = discriminator_forward(disc, Tensor(rows)).values
    return prototypes.frequencies() @ probs


def normalize_mi_weights(mi: dict[int, float], gamma: float) -> tuple[dict[int, float], dict[int, float]]:
    """W_m = |c_k|·MI_m / Σ MI (до отсечения) и после отсечения в [1−γ, 1+γ]"""
    total = math.fsum(mi.values())
    if total <= 0:
        ones = {m: 1.0 for m in mi}
        return ones, dict(ones)
    raw = {m: len(mi) * value / total for m, value in mi.items()}
    clipped = {m: min(max(w, 1.0 - gamma), 1.0 + gamma) for m, w in raw.items()}
    return raw, clipped


def compute_mi_weights(cluster: ClusterState, gamma: float) -> tuple[dict[int, float], dict[int, float], np.ndarray]:
    """
    MI_m = JSD(P(y|m), P(y|c_k)) и отсечённые веса W_m для участников кластера.

    Значения привязаны к идентификаторам клиентов, поэтому порядок участников
    на результат не влияет. Возвращает (MI, W, P(y|c_k)).
    """
    if cluster.generated is None:
        raise ProtocolError(f"Кластер {cluster.cluster_id}: нет сгенерированных признаков")
    disc = cluster.discriminator.frozen()
    cluster_post = class_posterior(disc, cluster.generated)
    mi = {}
    for m in sorted(cluster.member_prototypes):
        client_post = class_posterior(disc, cluster.member_prototypes[m])
        mi[m] = jensen_shannon_divergence(client_post, cluster_post)
    _, weights = normalize_mi_weights(mi, gamma)
    return mi, weights, cluster_post


def apply_local_correction(client: ClientState, weight: float, gamma: Optional[float] = None) -> ClientState:
    """θ̃_m = W_m θ_m для всех тензоров генератора; моменты Adam не трогаем"""
    if not math.isfinite(weight):
        raise ProtocolError(f"Клиент {client.client_id}: нечисловой вес коррекции {weight}")
    if gamma is not None and not (1.0 - gamma - 1e-12 <= weight <= 1.0 + gamma + 1e-12):
        raise ProtocolError(f"Клиент {client.client_id}: вес {weight} вне [1−γ, 1+γ]")
    return replace(client, generator=client.generator.scaled(weight))


def aggregate_discriminators(clusters: Sequence[ClusterState], num_clients: int) -> DiscriminatorParams:
    """φ_global = Σ_k (|c_k| / M) φ_k"""
    weights = [c.size / num_clients for c in clusters]
    if abs(math.fsum(weights) - 1.0) > 1e-9:
        raise ProtocolError(f"Размеры кластеров не дают в сумме M={num_clients}")
    return DiscriminatorParams.from_arrays(weighted_average([c.discriminator for c in clusters], weights))


def fedavg(generators: Sequence[GeneratorParams], sizes: Sequence[int],
           names: Sequence[str] = GeneratorParams.BACKBONE_AND_HEAD) -> dict[str, np.ndarray]:
    """θ = Σ (N_m / N) θ_m по выбранным тензорам"""
    total = float(sum(sizes))
    if total <= 0:
        raise ProtocolError("FedAvg: суммарный размер выборки равен нулю")
    return weighted_average(generators, [n / total for n in sizes], names)
