# app/services/training.py
"""
Локальное обучение клиентов, предобучение для кластеризации и серверное
обучение дискриминатора кластера.
"""
import logging
import math
from dataclasses import replace
from typing import Optional

import numpy as np

from app.errors import TrainingError
from app.schemas import LossBreakdown
from app.services.aggregation import compute_local_prototypes, group_mean_matrix, soft_assignment_matrix
from app.services.graphdata import LocalGraph
from app.services.losses import (
    classification_loss,
    composite_loss,
    discriminator_loss,
    gan_diversity_loss,
    infonce_mi_loss,
)
from app.services.networks import GeneratorParams, ParamBundle, discriminator_forward, generator_forward
from app.services.numerics import Tensor, adam_step, matmul, mul, reduce_sum, softmax, take_rows
from app.services.state import ClientState, ClusterContext, ClusterState, OptimizerState, PrototypeSet, fresh_optimizer

logger = logging.getLogger(__name__)


def predict(generator: GeneratorParams, graph: LocalGraph) -> np.ndarray:
    """Предсказанные классы для всех узлов графа"""
    logits, _ = generator_forward(generator, graph)
    return np.argmax(logits.values, axis=1)


def _adam_update(bundle: ParamBundle, opt: OptimizerState) -> tuple[ParamBundle, OptimizerState]:
    """Шаг Adam по тензорам, получившим градиент; остальные переносятся как есть"""
    arrays = bundle.arrays()
    new_opt = dict(opt)
    for name, tensor in bundle.items():
        if tensor.grad is None:
            continue
        updated, new_opt[name] = adam_step(tensor, tensor.grad, opt[name])
        arrays[name] = updated.values
    return type(bundle).from_arrays(arrays), new_opt


def _check_breakdown(owner: str, breakdown: LossBreakdown) -> None:
    for component in ("ce", "gan", "mi", "composite"):
        if not math.isfinite(getattr(breakdown, component)):
            raise TrainingError(f"{owner}: нечисловое значение функции потерь", component)


def _weighted_rows(probs: Tensor, weights: np.ndarray) -> Tensor:
    """Σ_h w_h · probs[h], распределение длины H"""
    return reduce_sum(mul(probs, Tensor(weights[:, None])), axis=0)


def _context_terms(
    client: ClientState,
    context: ClusterContext,
    logits: Tensor,
    feats: Tensor,
    temperature: float,
) -> tuple[Optional[Tensor], Optional[Tensor]]:
    """GAN- и MI-члены для клиента в кластере с известным контекстом"""
    graph = client.graph
    local_classes = np.flatnonzero(client.class_counts > 0)
    cluster_classes = context.generated.classes
    classes = np.array([c for c in local_classes if c in set(cluster_classes.tolist())], dtype=np.int64)
    if classes.size == 0:
        return None, None
    freqs = client.class_counts[classes].astype(np.float64)
    freqs /= freqs.sum()

    prototypes = matmul(Tensor(group_mean_matrix(graph.labels, graph.train_mask, classes)), feats)
    probs = softmax(logits).values
    generated = matmul(Tensor(soft_assignment_matrix(probs, classes)), feats)

    disc = context.discriminator
    p_true = _weighted_rows(discriminator_forward(disc, prototypes).detach(), freqs)
    own = _weighted_rows(discriminator_forward(disc, generated), freqs)
    peer = Tensor(context.cluster_posterior)
    gan = gan_diversity_loss(p_true, [own] + [peer] * (context.num_members - 1), client.num_classes)

    position = {int(c): i for i, c in enumerate(cluster_classes)}
    positive_index = [position[int(c)] for c in classes]
    mi = infonce_mi_loss(client.projection, prototypes, context.generated.rows(), positive_index, temperature)
    return gan, mi


def client_local_train(
    client: ClientState,
    context: Optional[ClusterContext],
    lambda1: float,
    lambda2: float,
    local_epochs: int,
    temperature: float = 1.0,
) -> tuple[ClientState, LossBreakdown]:
    """
    local_epochs полных шагов Adam по ce + λ1·gan + λ2·mi.

    Без контекста кластера (раунд 0, базовые линии) обучение идёт только по CE.
    Возвращается разбивка потерь последней эпохи до шага оптимизатора; при
    local_epochs = 0 потери вычисляются один раз без обновления.
    """
    generator = client.generator.copy()
    projection = client.projection.copy()
    gen_opt, proj_opt = client.generator_opt, client.projection_opt
    owner = f"Клиент {client.client_id}"
    breakdown: Optional[LossBreakdown] = None

    for _ in range(max(local_epochs, 1)):
        trial = replace(client, generator=generator, projection=projection)
        logits, feats = generator_forward(generator, client.graph)
        ce = classification_loss(logits, client.graph.labels, client.graph.train_mask)
        gan = mi = None
        if context is not None:
            gan, mi = _context_terms(trial, context, logits, feats, temperature)
        total, breakdown = composite_loss(ce, gan, mi, lambda1, lambda2)
        _check_breakdown(owner, breakdown)
        if local_epochs == 0:
            break
        total.backward()
        generator, gen_opt = _adam_update(generator, gen_opt)
        projection, proj_opt = _adam_update(projection, proj_opt)

    logger.debug("%s: ce=%.5f gan=%.5f mi=%.5f", owner, breakdown.ce, breakdown.gan, breakdown.mi)
    updated = replace(
        client,
        generator=generator,
        projection=projection,
        generator_opt=gen_opt,
        projection_opt=proj_opt,
    )
    return updated, breakdown


def pretrain_representations(client: ClientState, pre_epochs: int) -> PrototypeSet:
    """
    Представители клиента для кластеризации: средние lz̃ по классам.

    Обучается копия генератора только по CE; параметры клиента не меняются.
    """
    learning_rate = next(iter(client.generator_opt.values())).learning_rate
    scratch = replace(
        client,
        generator=client.generator.copy(),
        generator_opt=fresh_optimizer(client.generator, learning_rate),
    )
    if pre_epochs > 0:
        scratch, _ = client_local_train(scratch, None, 0.0, 0.0, pre_epochs)
    return compute_local_prototypes(scratch)


def train_cluster_discriminator(cluster: ClusterState, d_steps: int) -> ClusterState:
    """d_steps шагов Adam по discriminator_loss на агрегатах cz̃ и cp"""
    if cluster.prototypes is None or cluster.generated is None:
        logger.warning("Кластер %d: нет агрегатов, обучение дискриминатора пропущено", cluster.cluster_id)
        return cluster
    classes = np.flatnonzero(cluster.prototypes.defined & cluster.generated.defined)
    if classes.size == 0:
        logger.warning("Кластер %d: нет общих классов, обучение дискриминатора пропущено", cluster.cluster_id)
        return cluster

    disc = cluster.discriminator.copy()
    opt = cluster.discriminator_opt
    synth = Tensor(cluster.generated.vectors)
    real = Tensor(cluster.prototypes.vectors)
    for step in range(d_steps):
        loss = discriminator_loss(disc, take_rows(synth, classes), take_rows(real, classes))
        if not math.isfinite(loss.item()):
            raise TrainingError(f"Кластер {cluster.cluster_id}: нечисловая потеря дискриминатора", "discriminator")
        loss.backward()
        disc, opt = _adam_update(disc, opt)
        logger.debug("Кластер %d, шаг %d: loss_D=%.5f", cluster.cluster_id, step, loss.item())
    return replace(cluster, discriminator=disc, discriminator_opt=opt)
