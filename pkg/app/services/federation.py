# app/services/federation.py
"""
Оркестрация раундов: GraphFedMIG и базовые линии local / fedavg / flhc.

Состояние федерации меняется только целиком по завершении раунда: при любой
ошибке внутри раунда оно восстанавливается из снимка, снятого в начале.
"""
import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterator, Optional, Sequence, TypeVar

import numpy as np

from app.errors import ConfigurationError, ProtocolError
from app.schemas import ExperimentConfig, LossBreakdown, MetricsBundle, RoundReport
from app.services.accounting import RoundTraffic, comm_accounting
from app.services.aggregation import (
    aggregate_cluster_prototypes,
    aggregate_discriminators,
    aggregate_generated_cluster_features,
    apply_local_correction,
    compute_generated_means,
    compute_local_prototypes,
    compute_mi_weights,
    fedavg,
)
from app.services.clustering import pretrain_and_cluster
from app.services.graphdata import FederationDataset
from app.services.metrics import evaluate
from app.services.networks import (
    DISCRIMINATOR_STREAM,
    GENERATOR_STREAM,
    PROJECTION_STREAM,
    SERVER_OWNER,
    DiscriminatorParams,
    GeneratorParams,
    ProjectionParams,
    model_rng,
)
from app.services.privacy import clip_and_perturb
from app.services.state import (
    ClientState,
    ClusterAssignment,
    ClusterContext,
    ClusterState,
    PrototypeSet,
    fresh_optimizer,
)
from app.services.training import client_local_train, predict, train_cluster_discriminator

logger = logging.getLogger(__name__)

DP_STREAM = 7
CLUSTERING_ARMS = ("graphfedmig", "flhc")

T = TypeVar("T")


@dataclass
class FederationState:
    config: ExperimentConfig
    dataset: FederationDataset
    clients: list[ClientState]
    assignment: ClusterAssignment
    clusters: list[ClusterState] = field(default_factory=list)
    global_discriminator: Optional[DiscriminatorParams] = None
    round_index: int = 0
    # Трафик подготовки (выгрузка представителей), учитывается в раунде 0
    setup_traffic: Optional[RoundTraffic] = None

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def num_clusters(self) -> int:
        return self.assignment.num_clusters


def _init_client(client_id: int, dataset: FederationDataset, cfg: ExperimentConfig) -> ClientState:
    graph = dataset.clients[client_id]
    generator = GeneratorParams.init(
        dataset.feature_dim, dataset.num_classes, model_rng(cfg.seed, client_id, GENERATOR_STREAM),
        feature_dim=cfg.feature_dim,
    )
    projection = ProjectionParams.init(cfg.feature_dim, model_rng(cfg.seed, client_id, PROJECTION_STREAM))
    return ClientState(
        client_id=client_id,
        graph=graph,
        generator=generator,
        projection=projection,
        generator_opt=fresh_optimizer(generator, cfg.learning_rate),
        projection_opt=fresh_optimizer(projection, cfg.learning_rate),
        class_counts=graph.class_counts(dataset.num_classes),
    )


def _setup_traffic(clients: Sequence[ClientState]) -> RoundTraffic:
    """Разовая выгрузка представителей классов для кластеризации"""
    traffic = RoundTraffic.for_clients(c.client_id for c in clients)
    for c in clients:
        traffic.upload(c.client_id, int((c.class_counts > 0).sum()) * c.generator.feature_dim)
    return traffic


def init_federation(dataset: FederationDataset, cfg: ExperimentConfig) -> FederationState:
    """Инициализация клиентов, разовая кластеризация и дискриминаторы кластеров"""
    dataset.validate()
    clients = [_init_client(m, dataset, cfg) for m in range(len(dataset.clients))]
    num = len(clients)
    setup = None
    if cfg.arm == "local":
        assignment = ClusterAssignment(tuple(range(num)), cfg.threshold)
    elif cfg.arm == "fedavg":
        assignment = ClusterAssignment((0,) * num, cfg.threshold)
    elif cfg.arm in CLUSTERING_ARMS:
        if cfg.clusters is not None and cfg.clusters > num:
            raise ConfigurationError(f"clusters={cfg.clusters} больше числа клиентов {num}")
        assignment = pretrain_and_cluster(clients, cfg.threshold, cfg.pre_epochs, cfg.clusters)
        setup = _setup_traffic(clients)
    else:
        raise ConfigurationError(f"Неизвестный режим {cfg.arm}")

    state = FederationState(cfg, dataset, clients, assignment, setup_traffic=setup)
    if cfg.arm == "graphfedmig":
        disc = DiscriminatorParams.init(
            cfg.feature_dim, dataset.num_classes, model_rng(cfg.seed, SERVER_OWNER, DISCRIMINATOR_STREAM)
        )
        state.global_discriminator = disc
        state.clusters = [
            ClusterState(
                cluster_id=k,
                members=assignment.members(k),
                discriminator=disc.copy(),
                discriminator_opt=fresh_optimizer(disc, cfg.learning_rate),
            )
            for k in range(assignment.num_clusters)
        ]
    logger.info("Федерация: %d клиентов, режим %s, K=%d", num, cfg.arm, assignment.num_clusters)
    return state


def _map_clients(fn: Callable[[int], T], client_ids: Sequence[int], workers: int) -> list[T]:
    """Порядок результатов совпадает с порядком client_ids"""
    if workers <= 1:
        return [fn(m) for m in client_ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, client_ids))


def _train_clients(
    state: FederationState,
    contexts: dict[int, Optional[ClusterContext]],
    lambda1: float,
    lambda2: float,
) -> dict[int, LossBreakdown]:
    cfg = state.config

    def train(m: int) -> tuple[ClientState, LossBreakdown]:
        return client_local_train(state.clients[m], contexts.get(m), lambda1, lambda2,
                                  cfg.local_epochs, cfg.temperature)

    results = _map_clients(train, range(state.num_clients), cfg.workers)
    losses = {}
    for m, (client, breakdown) in enumerate(results):
        state.clients[m] = client
        losses[m] = breakdown
    return losses


def _cluster_fedavg(state: FederationState, members: Sequence[int], traffic: RoundTraffic,
                    count_upload: bool = True) -> None:
    """FedAvg backbone + классификатора внутри группы клиентов, веса N_m"""
    names = GeneratorParams.BACKBONE_AND_HEAD
    gens = [state.clients[m].generator for m in members]
    averaged = fedavg(gens, [state.clients[m].num_train for m in members], names)
    size = gens[0].num_elements(names)
    for m in members:
        client = state.clients[m]
        if count_upload:
            traffic.upload(m, size)
        traffic.download(m, size)
        state.clients[m] = replace(client, generator=GeneratorParams.from_arrays({**client.generator.arrays(),
                                                                                  **averaged}))


def _perturbed(prototypes: PrototypeSet, state: FederationState, client_id: int, salt: int) -> PrototypeSet:
    dp = state.config.dp
    if not dp.enabled:
        return prototypes
    rng = np.random.default_rng([state.config.seed, client_id, DP_STREAM, state.round_index, salt])
    counts = prototypes.counts[prototypes.classes]
    return prototypes.with_rows(clip_and_perturb(prototypes.rows(), dp, rng, counts))


def _graphfedmig_round(state: FederationState, traffic: RoundTraffic) -> tuple[dict, dict, dict]:
    cfg = state.config
    lambda1, lambda2 = cfg.effective_lambdas()
    num_classes = state.dataset.num_classes

    # (1) рассылка φ_k = φ_global, cp, cz̃ и q̄_k прошлого раунда
    contexts: dict[int, Optional[ClusterContext]] = {}
    for i, cluster in enumerate(state.clusters):
        cluster = replace(cluster, discriminator=state.global_discriminator.copy())
        state.clusters[i] = cluster
        context = cluster.context()
        for m in cluster.members:
            contexts[m] = context
            if context is not None:
                traffic.download(
                    m,
                    *[t.values.size for _, t in context.discriminator.items()],
                    context.prototypes.rows().size,
                    context.generated.rows().size,
                    num_classes,
                )

    # (2) локальное обучение
    losses = _train_clients(state, contexts, lambda1, lambda2)

    # (3) выгрузка lp, ĝ, счётчиков и параметров генератора
    uploaded: dict[int, tuple[PrototypeSet, PrototypeSet]] = {}
    for m, client in enumerate(state.clients):
        lp = compute_local_prototypes(client)
        generated = compute_generated_means(client)
        state.clients[m] = replace(client, local_prototypes=lp, generated_means=generated)
        uploaded[m] = (_perturbed(lp, state, m, 0), _perturbed(generated, state, m, 1))
        traffic.upload(m, lp.rows().size, generated.rows().size, num_classes,
                       *[t.values.size for _, t in client.generator.items()])

    # (4) агрегаты кластера, дискриминатор, MI-веса
    all_mi: dict[int, float] = {}
    all_weights: dict[int, float] = {}
    for i, cluster in enumerate(state.clusters):
        member_lp = {m: uploaded[m][0] for m in cluster.members}
        member_gen = [uploaded[m][1] for m in cluster.members]
        cluster = replace(
            cluster,
            member_prototypes=member_lp,
            prototypes=aggregate_cluster_prototypes([member_lp[m] for m in cluster.members]),
            generated=aggregate_generated_cluster_features(member_gen),
        )
        cluster = train_cluster_discriminator(cluster, cfg.d_steps)
        mi, weights, posterior = compute_mi_weights(cluster, cfg.gamma)
        state.clusters[i] = replace(cluster, mi=mi, weights=weights, posterior=posterior)
        all_mi.update(mi)
        all_weights.update(weights)
        logger.debug("Кластер %d: MI=%s W=%s", cluster.cluster_id, mi, weights)

    # (5) MI-коррекция генераторов или FedAvg внутри кластера
    for cluster in state.clusters:
        if cfg.ablation.migma:
            for m in cluster.members:
                state.clients[m] = apply_local_correction(state.clients[m], all_weights[m], cfg.gamma)
                traffic.download(m, 1)
        else:
            _cluster_fedavg(state, cluster.members, traffic, count_upload=False)

    # (6) φ_global
    state.global_discriminator = aggregate_discriminators(state.clusters, state.num_clients)
    return losses, all_mi, all_weights


def _baseline_round(state: FederationState, traffic: RoundTraffic) -> dict[int, LossBreakdown]:
    losses = _train_clients(state, {}, 0.0, 0.0)
    if state.config.arm != "local":
        for k in range(state.num_clusters):
            _cluster_fedavg(state, state.assignment.members(k), traffic)
    return losses


def evaluate_personalized(generators: Sequence[GeneratorParams], dataset: FederationDataset) -> MetricsBundle:
    """Каждый тестовый узел оценивается моделью своего клиента; метрики по объединению"""
    if len(generators) != len(dataset.clients):
        raise ConfigurationError(f"{len(generators)} генераторов на {len(dataset.clients)} клиентов")
    preds, labels = [], []
    for generator, graph in zip(generators, dataset.clients):
        preds.append(predict(generator, graph)[graph.test_mask])
        labels.append(graph.labels[graph.test_mask])
    y = np.concatenate(labels)
    return evaluate(np.concatenate(preds), y, np.ones(len(y), dtype=bool),
                    dataset.minority_classes, dataset.num_classes)


def evaluate_federation(state: FederationState) -> MetricsBundle:
    return evaluate_personalized([c.generator for c in state.clients], state.dataset)


def snapshot(state: FederationState) -> FederationState:
    """Глубокая копия изменяемой части состояния; данные и конфигурация общие"""
    memo = {id(state.dataset): state.dataset, id(state.config): state.config}
    for graph in state.dataset.clients:
        memo[id(graph)] = graph
    return copy.deepcopy(state, memo)


def restore(state: FederationState, saved: FederationState) -> None:
    for f in fields(state):
        setattr(state, f.name, getattr(saved, f.name))


def run_round(state: FederationState) -> RoundReport:
    """Один раунд выбранного режима; атомарен относительно исключений"""
    saved = snapshot(state)
    try:
        return _run_round(state)
    except Exception:
        restore(state, saved)
        logger.exception("Раунд %d прерван, состояние откачено", saved.round_index)
        raise


def _run_round(state: FederationState) -> RoundReport:
    cfg = state.config
    traffic = RoundTraffic.for_clients(range(state.num_clients))
    mi: dict[int, float] = {}
    weights: dict[int, float] = {}
    if cfg.arm == "graphfedmig":
        losses, mi, weights = _graphfedmig_round(state, traffic)
    elif cfg.arm in ("local", "fedavg", "flhc"):
        losses = _baseline_round(state, traffic)
    else:
        raise ProtocolError(f"Неизвестный режим {cfg.arm}")

    if state.setup_traffic is not None:
        traffic = state.setup_traffic.merge(traffic)
        state.setup_traffic = None
    up, down = comm_accounting(traffic)
    report = RoundReport(
        round=state.round_index,
        arm=cfg.arm,
        losses=losses,
        mi=mi,
        weights=weights,
        metrics=evaluate_federation(state),
        bytes_uploaded=up,
        bytes_downloaded=down,
    )
    logger.info(
        "Раунд %d (%s): acc=%.4f minority_recall=%.4f up=%d down=%d",
        report.round, cfg.arm, report.metrics.overall_accuracy, report.metrics.minority_recall,
        report.total_uploaded, report.total_downloaded,
    )
    state.round_index += 1
    return report


def iterate_rounds(state: FederationState, rounds: Optional[int] = None) -> Iterator[RoundReport]:
    for _ in range(state.config.rounds if rounds is None else rounds):
        yield run_round(state)


def run_baseline(mode: str, dataset: FederationDataset, cfg: ExperimentConfig) -> list[RoundReport]:
    """Все раунды базовой линии local, fedavg или flhc"""
    if mode not in ("local", "fedavg", "flhc"):
        raise ConfigurationError(f"Неизвестная базовая линия {mode}")
    state = init_federation(dataset, cfg.model_copy(update={"arm": mode}))
    return list(iterate_rounds(state))
