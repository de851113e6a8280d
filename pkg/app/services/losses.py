# app/services/losses.py
import math
from typing import Optional, Sequence

import numpy as np

from app import config
from app.errors import ConfigurationError, ShapeError
from app.schemas import LossBreakdown
from app.services.networks import (
    DiscriminatorParams,
    ProjectionParams,
    discriminator_forward,
    project_normalized,
)
from app.services.numerics import (
    Tensor,
    add,
    as_tensor,
    log,
    log_softmax,
    matmul,
    mul,
    reduce_sum,
    sub,
    take_rows,
)

# Распределение по H классам; сумма Σ P(y|G) намеренно не нормирована
ClassDistribution = Tensor


def check_distribution(p: np.ndarray, mass: float = 1.0, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - mass) > tol:
        raise ConfigurationError(f"Ожидалось распределение с массой {mass}, сумма {p.sum():.6g}")
    return p


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def classification_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Средняя кросс-энтропия по узлам маски"""
    index = np.flatnonzero(mask)
    if index.size == 0:
        raise ConfigurationError("classification_loss: маска не выбирает ни одного узла")
    picked = take_rows(log_softmax(logits), index)
    target = one_hot(np.asarray(labels)[index], logits.shape[1])
    return mul(reduce_sum(mul(picked, target)), -1.0 / index.size)


def discriminator_loss(disc: DiscriminatorParams, synth: Tensor, prototypes: Tensor | np.ndarray) -> Tensor:
    """
    CE между D_k(cz̃) и мягкой целью D_k(cp) по строкам классов.

    Цель D_k(cp) вычисляется без градиента.
    """
    synth = as_tensor(synth)
    prototypes = as_tensor(prototypes)
    if synth.shape != prototypes.shape:
        raise ShapeError(f"discriminator_loss: формы {list(synth.shape)} и {list(prototypes.shape)}")
    target = discriminator_forward(disc, prototypes).detach()
    predicted = discriminator_forward(disc, synth)
    rows = synth.shape[0]
    return mul(reduce_sum(mul(target, log(predicted))), -1.0 / rows)


def generalized_kl(a: Tensor, b: Tensor) -> Tensor:
    """Σ a ln(a/b) без поправки на массу, с отсечкой 1e-12"""
    return reduce_sum(mul(a, sub(log(a), log(b))))


def gan_diversity_loss(
    p_true: ClassDistribution, generator_dists: Sequence[ClassDistribution], num_classes: int
) -> Tensor:
    """KL(p‖M) + H·KL(S‖M) − (H+1)ln(H+1) + H ln H, где S = Σ распределений генераторов"""
    if not generator_dists:
        raise ConfigurationError("gan_diversity_loss: пустой список генераторов")
    p_true = as_tensor(p_true)
    total = as_tensor(generator_dists[0])
    for dist in generator_dists[1:]:
        total = add(total, as_tensor(dist))
    if total.shape != p_true.shape or p_true.shape != (num_classes,):
        raise ShapeError("gan_diversity_loss: распределения должны иметь длину H")
    mix = mul(add(p_true, total), 0.5)
    H = float(num_classes)
    constant = -(H + 1.0) * math.log(H + 1.0) + H * math.log(H)
    return add(add(generalized_kl(p_true, mix), mul(generalized_kl(total, mix), H)), constant)


def infonce_mi_loss(
    proj: ProjectionParams,
    local_prototypes: Tensor,
    cluster_generated: Tensor | np.ndarray,
    positive_index: Sequence[int],
    temperature: float = config.DEFAULT_TEMPERATURE,
) -> Tensor:
    """
    InfoNCE между локальными прототипами lp^h и признаками кластера cz̃.

    Строка r в local_prototypes соответствует классу, для которого positive_index[r] указывает
    строку cz̃ того же класса; все строки cz̃ входят в знаменатель.
    """
    rows = local_prototypes.shape[0]
    if rows == 0:
        raise ConfigurationError("infonce_mi_loss: у клиента нет ни одного класса")
    if len(positive_index) != rows:
        raise ShapeError("infonce_mi_loss: число позитивов не совпадает с числом прототипов")
    anchors = project_normalized(proj, local_prototypes)
    candidates = project_normalized(proj, as_tensor(cluster_generated))
    sims = matmul(anchors, candidates.T)
    if temperature != 1.0:
        sims = mul(sims, 1.0 / temperature)
    target = np.zeros(sims.shape)
    target[np.arange(rows), np.asarray(positive_index)] = 1.0
    return mul(reduce_sum(mul(log_softmax(sims), target)), -1.0 / rows)


def composite_loss(
    ce: Tensor,
    gan: Optional[Tensor],
    mi: Optional[Tensor],
    lambda1: float = config.DEFAULT_LAMBDA1,
    lambda2: float = config.DEFAULT_LAMBDA2,
) -> tuple[Tensor, LossBreakdown]:
    """ce + λ1·gan + λ2·mi; члены с нулевым весом в граф не входят"""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigurationError("λ1 и λ2 должны быть неотрицательны")
    total = ce
    if gan is not None and lambda1 > 0:
        total = add(total, mul(gan, lambda1))
    if mi is not None and lambda2 > 0:
        total = add(total, mul(mi, lambda2))
    breakdown = LossBreakdown(
        ce=ce.item(),
        gan=gan.item() if gan is not None else 0.0,
        mi=mi.item() if mi is not None else 0.0,
        composite=total.item(),
        lambda1=lambda1,
        lambda2=lambda2,
    )
    return total, breakdown


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    live = p > 0
    return float(np.sum(p[live] * (np.log(np.maximum(p[live], config.PROB_FLOOR))
                                   - np.log(np.maximum(q[live], config.PROB_FLOOR)))))


def jensen_shannon_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """JSD по натуральному логарифму, значение в [0, ln 2]"""
    p = check_distribution(p)
    q = check_distribution(q)
    if p.shape != q.shape:
        raise ShapeError("jensen_shannon_divergence: распределения разной длины")
    m = 0.5 * (p + q)
    value = 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)
    return min(max(value, 0.0), math.log(2.0))
