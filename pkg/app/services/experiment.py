# app/services/experiment.py
"""Сборка данных, прогон эксперимента и выгрузка отчётов"""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from app.db.models import ledger_path
from app.errors import ConfigurationError
from app.schemas import ExperimentConfig, MetricsBundle, RoundReport
from app.services.federation import FederationState, evaluate_personalized, init_federation, iterate_rounds
from app.services.graphdata import (
    FederationDataset,
    generate_sbm,
    load_csv_graph,
    load_federation,
    partition_clients,
    resolve_minority_classes,
)
from app.services.ledger import RunLedger
from app.services.networks import GeneratorParams, generator_forward, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

ROUND_COLUMNS = (
    "round", "arm", "overall_acc", "minority_acc", "overall_recall", "minority_recall",
    "mean_ce", "mean_gan", "mean_mi", "bytes_up", "bytes_down",
)


@dataclass
class ExperimentResult:
    out_dir: Path
    reports: list[RoundReport] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    run_id: Optional[int] = None


def build_dataset(cfg: ExperimentConfig) -> FederationDataset:
    """Федерация из SBM, CSV с разбиением на клиентов или сохранённого каталога"""
    if cfg.data_dir is not None:
        dataset = load_federation(cfg.data_dir)
    elif cfg.csv is not None:
        src = cfg.csv
        graph = load_csv_graph(src.edges, src.features, src.labels, split=src.split, num_classes=src.num_classes)
        dataset = partition_clients(
            graph, src.num_clients, src.size_range, seed=cfg.seed,
            num_classes=src.num_classes, minority_classes=cfg.minority_classes,
        )
    else:
        dataset = generate_sbm(cfg.sbm, cfg.seed)
    if cfg.minority_classes is not None:
        labels = np.concatenate([g.labels for g in dataset.clients])
        dataset.minority_classes = resolve_minority_classes(labels, dataset.num_classes, cfg.minority_classes)
    dataset.validate()
    return dataset


def _round_row(report: RoundReport) -> list:
    m = report.metrics
    return [
        report.round, report.arm,
        repr(m.overall_accuracy), repr(m.minority_accuracy), repr(m.overall_recall), repr(m.minority_recall),
        repr(report.mean_loss("ce")), repr(report.mean_loss("gan")), repr(report.mean_loss("mi")),
        report.total_uploaded, report.total_downloaded,
    ]


def write_checkpoints(state: FederationState, out_dir: Path) -> Path:
    """checkpoints/round_NNNN/client_<id>.json и discriminator.json"""
    folder = out_dir / "checkpoints" / f"round_{state.round_index - 1:04d}"
    for client in state.clients:
        save_checkpoint(client.generator, folder / f"client_{client.client_id}.json")
    if state.global_discriminator is not None:
        save_checkpoint(state.global_discriminator, folder / "discriminator.json")
    logger.info("Контрольные точки записаны в %s", folder)
    return folder


def summarize(state: FederationState, reports: list[RoundReport]) -> dict:
    """Итог без режима и байтов: эквивалентные конвейеры дают один и тот же файл"""
    return {
        "metrics": reports[-1].metrics.model_dump(),
        "rounds": len(reports),
        "seed": state.config.seed,
        "num_clusters": state.num_clusters,
    }


def run_experiment(cfg: ExperimentConfig, dataset: Optional[FederationDataset] = None) -> ExperimentResult:
    """
    Полный прогон: rounds.csv пишется построчно, summary.json в конце.

    При сбое посреди прогона уже записанные строки rounds.csv сохраняются,
    запуск помечается в журнале как failed, исключение пробрасывается.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(out_dir)
    ledger = RunLedger(ledger_path(out_dir))
    run_id = None
    try:
        run_id = result.run_id = ledger.start_run(cfg)
        dataset = dataset or build_dataset(cfg)
        state = init_federation(dataset, cfg)
        with open(out_dir / "rounds.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ROUND_COLUMNS)
            for report in iterate_rounds(state):
                writer.writerow(_round_row(report))
                fh.flush()
                ledger.record_round(run_id, report)
                result.reports.append(report)
                if cfg.checkpoint_every and state.round_index % cfg.checkpoint_every == 0:
                    write_checkpoints(state, out_dir)
        result.summary = summarize(state, result.reports)
        (out_dir / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
        ledger.finish_run(run_id, "finished", result.summary)
        logger.info("Прогон %s завершён: %s", cfg.arm, out_dir)
        return result
    except Exception:
        if run_id is not None:
            ledger.finish_run(run_id, "failed")
        raise
    finally:
        ledger.dispose()


def pca_project(features: np.ndarray) -> np.ndarray:
    """Две главные компоненты через собственное разложение ковариации"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ConfigurationError("Для проекции нужно не меньше двух строк признаков")
    centered = features - features.mean(axis=0)
    cov = centered.T @ centered / (features.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    top = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    if top.shape[1] < 2:
        top = np.hstack([top, np.zeros((top.shape[0], 2 - top.shape[1]))])
    # Знак: наибольшая по модулю координата компоненты положительна
    for j in range(top.shape[1]):
        if top[np.argmax(np.abs(top[:, j])), j] < 0:
            top[:, j] = -top[:, j]
    return centered @ top


def emit_projection_data(features: np.ndarray, labels: np.ndarray, out_path: str | Path) -> np.ndarray:
    """CSV pc1, pc2, label для внешней визуализации"""
    projected = pca_project(features)
    labels = np.asarray(labels)
    if labels.shape[0] != projected.shape[0]:
        raise ConfigurationError("Число меток не совпадает с числом строк признаков")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pc1", "pc2", "label"])
        for (x, y), label in zip(projected.tolist(), labels.tolist()):
            writer.writerow([repr(x), repr(y), int(label)])
    logger.info("Проекция записана в %s", out_path)
    return projected


def load_client_generator(checkpoint_dir: str | Path, client_id: int) -> GeneratorParams:
    path = Path(checkpoint_dir) / f"client_{client_id}.json"
    if not path.exists():
        raise ConfigurationError(f"Нет контрольной точки {path}")
    bundle = load_checkpoint(path)
    if not isinstance(bundle, GeneratorParams):
        raise ConfigurationError(f"{path}: ожидался генератор, получен {bundle.KIND}")
    return bundle


def evaluate_checkpoints(checkpoint_dir: str | Path, dataset: FederationDataset) -> MetricsBundle:
    """Персонализированная оценка по генераторам из контрольных точек"""
    generators = [load_client_generator(checkpoint_dir, m) for m in range(len(dataset.clients))]
    return evaluate_personalized(generators, dataset)


def project_client(checkpoint_dir: str | Path, dataset: FederationDataset, client_id: int,
                   out_path: str | Path) -> np.ndarray:
    """PCA-проекция lz̃ одного клиента по его контрольной точке"""
    if not 0 <= client_id < len(dataset.clients):
        raise ConfigurationError(f"Клиента {client_id} нет в федерации")
    graph = dataset.clients[client_id]
    _, feats = generator_forward(load_client_generator(checkpoint_dir, client_id), graph)
    return emit_projection_data(feats.values, graph.labels, out_path)
