# app/services/state.py
"""Состояние протокола: клиенты, кластеры, разбиение на кластеры"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.services.graphdata import LocalGraph
from app.services.networks import DiscriminatorParams, GeneratorParams, ParamBundle, ProjectionParams
from app.services.numerics import AdamState

OptimizerState = dict[str, AdamState]


def fresh_optimizer(bundle: ParamBundle, learning_rate: float) -> OptimizerState:
    return {name: AdamState.zeros_like(t, learning_rate=learning_rate) for name, t in bundle.items()}


@dataclass
class PrototypeSet:
    """Центроиды по классам (строки H×d) и счётчики |D^h|; строки без счётчика не определены"""

    vectors: np.ndarray
    counts: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return self.counts > 0

    @property
    def classes(self) -> np.ndarray:
        return np.flatnonzero(self.defined)

    def rows(self) -> np.ndarray:
        return self.vectors[self.classes]

    def frequencies(self) -> np.ndarray:
        """Частоты определённых классов (в порядке classes)"""
        counts = self.counts[self.classes].astype(np.float64)
        return counts / counts.sum()

    def with_rows(self, rows: np.ndarray) -> "PrototypeSet":
        vectors = self.vectors.copy()
        vectors[self.classes] = rows
        return PrototypeSet(vectors, self.counts.copy())


@dataclass
class ClientState:
    client_id: int
    graph: LocalGraph
    generator: GeneratorParams
    projection: ProjectionParams
    generator_opt: OptimizerState
    projection_opt: OptimizerState
    class_counts: np.ndarray
    local_prototypes: Optional[PrototypeSet] = None
    generated_means: Optional[PrototypeSet] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def num_train(self) -> int:
        return int(self.graph.train_mask.sum())


@dataclass(frozen=True)
class ClusterAssignment:
    """Разовое отображение клиент → кластер; кластеры нумеруются плотно в [0, K)"""

    labels: tuple[int, ...]
    threshold: float

    @property
    def num_clusters(self) -> int:
        return len(set(self.labels))

    def members(self, cluster_id: int) -> list[int]:
        return [m for m, k in enumerate(self.labels) if k == cluster_id]

    def partition(self) -> frozenset[frozenset[int]]:
        """Разбиение без учёта нумерации кластеров"""
        return frozenset(frozenset(self.members(k)) for k in range(self.num_clusters))


@dataclass
class ClusterContext:
    """То, что сервер рассылает участникам кластера в начале раунда"""

    discriminator: DiscriminatorParams
    prototypes: PrototypeSet
    generated: PrototypeSet
    cluster_posterior: np.ndarray
    num_members: int


@dataclass
class ClusterState:
    cluster_id: int
    members: list[int]
    discriminator: DiscriminatorParams
    discriminator_opt: OptimizerState
    prototypes: Optional[PrototypeSet] = None
    generated: Optional[PrototypeSet] = None
    posterior: Optional[np.ndarray] = None
    member_prototypes: dict[int, PrototypeSet] = field(default_factory=dict)
    mi: dict[int, float] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.members)

    def context(self) -> Optional[ClusterContext]:
        if self.prototypes is None or self.generated is None or self.posterior is None:
            return None
        return ClusterContext(
            discriminator=self.discriminator.frozen(),
            prototypes=self.prototypes,
            generated=self.generated,
            cluster_posterior=self.posterior,
            num_members=self.size,
        )
