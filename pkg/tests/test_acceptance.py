# tests/test_acceptance.py
"""Статистические прогоны на полноразмерной SBM-федерации; запуск: pytest -m slow"""
import numpy as np
import pytest

from app.schemas import AblationFlags, ExperimentConfig, SbmConfig
from app.services.federation import init_federation, iterate_rounds
from app.services.graphdata import generate_sbm

SEEDS = (0, 1, 2)
ROUNDS = 50
HC_GAN = AblationFlags(gan=True, mi_loss=False, migma=False)

pytestmark = pytest.mark.slow


def _config(seed: int, **overrides) -> ExperimentConfig:
    params = dict(
        sbm=SbmConfig(num_clients=8, nodes_per_client=(600, 600), num_classes=4, minority_fraction=0.1, seed=seed),
        rounds=ROUNDS,
        seed=seed,
    )
    params.update(overrides)
    return ExperimentConfig(**params)


def _metric_curves(cfg: ExperimentConfig) -> list:
    state = init_federation(generate_sbm(cfg.sbm), cfg)
    return [r.metrics for r in iterate_rounds(state)]


@pytest.fixture(scope="module")
def curves():
    out = {}
    for seed in SEEDS:
        out[("full", seed)] = _metric_curves(_config(seed))
        out[("fedavg", seed)] = _metric_curves(_config(seed, arm="fedavg"))
        out[("hc_gan", seed)] = _metric_curves(_config(seed, ablation=HC_GAN))
    return out


def _final_recall(curves, arm):
    return float(np.mean([curves[(arm, s)][-1].minority_recall for s in SEEDS]))


def test_minority_recall_beats_fedavg(curves):
    assert _final_recall(curves, "full") > _final_recall(curves, "fedavg")


def test_full_model_not_worse_than_hc_gan(curves):
    assert _final_recall(curves, "full") >= _final_recall(curves, "hc_gan")


def test_late_rounds_are_more_stable(curves):
    def late_variance(arm, seed):
        tail = [m.minority_accuracy for m in curves[(arm, seed)][-20:]]
        return float(np.var(tail))

    wins = sum(late_variance("full", s) <= late_variance("hc_gan", s) for s in SEEDS)
    assert wins >= 2
