# app/services/clustering.py
"""Разовая иерархическая кластеризация клиентов по представителям классов"""
import logging
from typing import Optional, Sequence

import numpy as np

from app.errors import ConfigurationError
from app.services.state import ClientState, ClusterAssignment, PrototypeSet
from app.services.training import pretrain_representations

logger = logging.getLogger(__name__)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Косинус угла; для нулевого вектора 0"""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(max(float(np.dot(a, b)) / (na * nb), -1.0), 1.0)


def cluster_similarity(a: PrototypeSet, b: PrototypeSet) -> Optional[float]:
    """Средний косинус по общим классам; None, если общих классов нет"""
    shared = np.flatnonzero(a.defined & b.defined)
    if shared.size == 0:
        return None
    return float(np.mean([cosine(a.vectors[h], b.vectors[h]) for h in shared]))


def merge_representatives(a: PrototypeSet, b: PrototypeSet) -> PrototypeSet:
    """(a + b) / 2 на общих классах, иначе строка того, у кого класс есть"""
    vectors = np.zeros_like(a.vectors)
    both = a.defined & b.defined
    vectors[both] = (a.vectors[both] + b.vectors[both]) / 2.0
    only_a = a.defined & ~b.defined
    only_b = b.defined & ~a.defined
    vectors[only_a] = a.vectors[only_a]
    vectors[only_b] = b.vectors[only_b]
    return PrototypeSet(vectors, a.counts + b.counts)


def _best_pair(reps: dict[int, PrototypeSet]) -> tuple[Optional[tuple[int, int]], Optional[float]]:
    ids = sorted(reps)
    best, best_score = None, None
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            score = cluster_similarity(reps[a], reps[b])
            # Строгое сравнение: при равенстве остаётся лексикографически меньшая пара
            if score is not None and (best_score is None or score > best_score):
                best, best_score = (a, b), score
    return best, best_score


def agglomerate(
    representatives: Sequence[PrototypeSet],
    threshold: float,
    target: Optional[int] = None,
) -> ClusterAssignment:
    """
    Агломеративное слияние: объединяется пара с максимальной схожестью S,
    пока max S > threshold. Если задан target, слияние идёт до K = target
    независимо от порога. Объединённый кластер получает меньший идентификатор.
    """
    num = len(representatives)
    if num == 0:
        raise ConfigurationError("Кластеризация без клиентов")
    if not -1.0 < threshold <= 1.0:
        raise ConfigurationError(f"Порог T должен лежать в (-1, 1], получено {threshold}")
    if target is not None and not 1 <= target <= num:
        raise ConfigurationError(f"Число кластеров {target} вне [1, {num}]")

    reps = {i: rep for i, rep in enumerate(representatives)}
    members = {i: [i] for i in range(num)}
    while len(reps) > 1:
        if target is not None and len(reps) <= target:
            break
        pair, score = _best_pair(reps)
        if pair is None:
            if target is None:
                logger.warning("Кластеризация: ни одна пара кластеров не имеет общих классов")
                break
            ids = sorted(reps)
            pair = (ids[0], ids[1])
            logger.warning("Кластеризация: нет общих классов, объединяются кластеры %s", pair)
        elif target is None and score <= threshold:
            break
        a, b = pair
        reps[a] = merge_representatives(reps[a], reps.pop(b))
        members[a] = sorted(members[a] + members.pop(b))
        logger.debug("Слияние кластеров %d и %d (S=%s)", a, b, score)

    # Плотная нумерация по наименьшему участнику
    labels = [0] * num
    for new_id, old_id in enumerate(sorted(members, key=lambda k: members[k][0])):
        for m in members[old_id]:
            labels[m] = new_id
    return ClusterAssignment(tuple(labels), threshold)


def pretrain_and_cluster(
    clients: Sequence[ClientState],
    threshold: float,
    pre_epochs: int,
    clusters: Optional[int] = None,
) -> ClusterAssignment:
    """Предобучение копий генераторов и кластеризация по средним lz̃ классов"""
    if not clients:
        raise ConfigurationError("Кластеризация без клиентов")
    representatives = [pretrain_representations(c, pre_epochs) for c in clients]
    assignment = agglomerate(representatives, threshold, clusters)
    logger.info(
        "Кластеризация: K=%d, %s",
        assignment.num_clusters,
        [assignment.members(k) for k in range(assignment.num_clusters)],
    )
    return assignment
