# app/services/privacy.py
"""
(ε, δ)-дифференциальная приватность для выгружаемых прототипов:
L2-отсечение строк и гауссов шум.
"""
import math
from typing import Optional

import numpy as np

from app.errors import ConfigurationError
from app.schemas import DpConfig


def gaussian_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """σ = Δf·sqrt(2·ln(1.25/δ)) / ε"""
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon должен быть > 0, получено {epsilon}")
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta должен лежать в (0, 1), получено {delta}")
    if not sensitivity > 0:
        raise ConfigurationError(f"Чувствительность должна быть > 0, получено {sensitivity}")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def clip_rows(vectors: np.ndarray, clip_norm: float) -> np.ndarray:
    """Масштабировать каждую строку до нормы не больше C"""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    factor = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    # Допуск делает отсечение идемпотентным при ошибке округления нормы
    return np.where(norms > clip_norm * (1.0 + 1e-12), vectors * factor, vectors)


def clip_and_perturb(
    vectors: np.ndarray,
    cfg: DpConfig,
    rng: np.random.Generator,
    counts: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Отсечение по норме C и шум N(0, σ²) с Δf = 2C (замена одного вектора).

    В режиме per_count_sensitivity строка класса h получает Δf = 2C/|D_m^h|.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if not cfg.enabled:
        return vectors.copy()
    clipped = clip_rows(vectors, cfg.clip_norm)
    if cfg.per_count_sensitivity:
        if counts is None or len(counts) != vectors.shape[0]:
            raise ConfigurationError("per_count_sensitivity требует счётчики по строкам")
        sigmas = np.array([
            gaussian_sigma(cfg.epsilon, cfg.delta, 2.0 * cfg.clip_norm / max(int(c), 1)) for c in counts
        ])[:, None]
    else:
        sigmas = gaussian_sigma(cfg.epsilon, cfg.delta, 2.0 * cfg.clip_norm)
    return clipped + sigmas * rng.standard_normal(clipped.shape)
