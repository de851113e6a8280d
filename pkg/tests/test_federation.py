# tests/test_federation.py
import numpy as np
import pytest

from app.errors import ConfigurationError, ProtocolError
from app.schemas import AblationFlags, DpConfig
from app.services import federation
from app.services.accounting import message_bytes
from app.services.federation import (
    evaluate_personalized,
    init_federation,
    iterate_rounds,
    run_baseline,
    run_round,
)
from app.services.graphdata import generate_sbm
from app.services.networks import GeneratorParams
from tests.conftest import small_config, small_sbm

HC_ONLY = AblationFlags(gan=False, mi_loss=False, migma=False)


def _run(cfg, dataset=None):
    dataset = dataset or generate_sbm(cfg.sbm)
    state = init_federation(dataset, cfg)
    return state, list(iterate_rounds(state))


def test_rounds_are_deterministic():
    cfg = small_config()
    state_a, reports_a = _run(cfg)
    state_b, reports_b = _run(cfg)
    assert [r.model_dump() for r in reports_a] == [r.model_dump() for r in reports_b]
    for a, b in zip(state_a.clients, state_b.clients):
        assert a.generator.equals(b.generator)
    assert state_a.global_discriminator.equals(state_b.global_discriminator)


def test_parallel_clients_match_sequential():
    _, sequential = _run(small_config())
    _, parallel = _run(small_config(workers=3))
    assert [r.model_dump() for r in sequential] == [r.model_dump() for r in parallel]


def test_graphfedmig_round_reports_weights_for_every_client():
    state, reports = _run(small_config())
    last = reports[-1]
    assert set(last.weights) == set(range(state.num_clients))
    assert all(0.5 <= w <= 1.5 for w in last.weights.values())
    assert all(0.0 <= v for v in last.mi.values())
    assert state.round_index == 2
    # Раунд 0 без контекста кластера: только CE
    assert all(b.gan == 0.0 and b.mi == 0.0 for b in reports[0].losses.values())
    assert any(b.mi > 0.0 for b in last.losses.values())


def test_hc_only_single_cluster_equals_fedavg():
    dataset = generate_sbm(small_sbm())
    ablated = small_config(clusters=1, lambda1=0.0, lambda2=0.0, ablation=HC_ONLY)
    state_g, reports_g = _run(ablated, dataset)
    state_f, reports_f = _run(small_config(arm="fedavg"), dataset)
    for g, f in zip(reports_g, reports_f):
        assert g.metrics == f.metrics
        # Члены gan и mi вычисляются и для отчёта, но с нулевым весом
        assert {m: b.composite for m, b in g.losses.items()} == {m: b.composite for m, b in f.losses.items()}
    for a, b in zip(state_g.clients, state_f.clients):
        assert a.generator.equals(b.generator)


def test_fedavg_traffic_matches_formula():
    state, reports = _run(small_config(arm="fedavg"))
    size = state.clients[0].generator.num_elements(GeneratorParams.BACKBONE_AND_HEAD)
    for report in reports:
        assert set(report.bytes_uploaded.values()) == {message_bytes(size)}
        assert set(report.bytes_downloaded.values()) == {message_bytes(size)}


def test_local_mode_has_no_traffic():
    _, reports = _run(small_config(arm="local"))
    for report in reports:
        assert report.total_uploaded == 0 and report.total_downloaded == 0
        assert len(report.bytes_uploaded) == 4


def test_graphfedmig_traffic_same_order_as_fedavg():
    dataset = generate_sbm(small_sbm())
    _, ours = _run(small_config(feature_dim=64), dataset)
    _, theirs = _run(small_config(arm="fedavg", feature_dim=64), dataset)
    # После раунда 0 рассылается полный контекст кластера
    ours_bytes = ours[1].total_uploaded + ours[1].total_downloaded
    their_bytes = theirs[1].total_uploaded + theirs[1].total_downloaded
    assert 1.0 < ours_bytes / their_bytes < 4.0


def test_setup_upload_counted_in_first_round():
    state, reports = _run(small_config(arm="flhc"))
    size = state.clients[0].generator.num_elements(GeneratorParams.BACKBONE_AND_HEAD)
    for m, client in enumerate(state.clients):
        defined = int((client.class_counts > 0).sum())
        expected = message_bytes(defined * client.generator.feature_dim) + message_bytes(size)
        assert reports[0].bytes_uploaded[m] == expected
        assert reports[1].bytes_uploaded[m] == message_bytes(size)


def test_flhc_with_unit_threshold_equals_local():
    dataset = generate_sbm(small_sbm())
    state_h, _ = _run(small_config(arm="flhc", threshold=1.0), dataset)
    state_l, _ = _run(small_config(arm="local"), dataset)
    assert state_h.num_clusters == state_h.num_clients
    for a, b in zip(state_h.clients, state_l.clients):
        assert a.generator.equals(b.generator)


def test_single_client_fedavg_equals_local():
    dataset = generate_sbm(small_sbm(num_clients=1))
    fed = run_baseline("fedavg", dataset, small_config())
    local = run_baseline("local", dataset, small_config())
    assert [r.metrics for r in fed] == [r.metrics for r in local]


def test_dp_noise_is_seeded():
    cfg = small_config(dp=DpConfig(enabled=True, epsilon=2.0))
    _, a = _run(cfg)
    _, b = _run(cfg)
    _, plain = _run(small_config())
    assert [r.mi for r in a] == [r.mi for r in b]
    assert a[-1].mi != plain[-1].mi


def test_failed_round_rolls_back(monkeypatch):
    state = init_federation(generate_sbm(small_sbm()), small_config())
    run_round(state)
    before = [c.generator.copy() for c in state.clients]
    disc = state.global_discriminator.copy()

    def broken(cluster, gamma):
        raise ProtocolError("сбой")

    monkeypatch.setattr(federation, "compute_mi_weights", broken)
    with pytest.raises(ProtocolError):
        run_round(state)
    assert state.round_index == 1
    for client, saved in zip(state.clients, before):
        assert client.generator.equals(saved)
    assert state.global_discriminator.equals(disc)


def test_unknown_baseline_and_cluster_count():
    dataset = generate_sbm(small_sbm())
    with pytest.raises(ConfigurationError):
        run_baseline("graphfedmig", dataset, small_config())
    with pytest.raises(ConfigurationError):
        init_federation(dataset, small_config(clusters=9))


def test_evaluate_personalized_checks_lengths():
    dataset = generate_sbm(small_sbm(num_clients=2))
    state = init_federation(dataset, small_config(arm="local"))
    with pytest.raises(ConfigurationError):
        evaluate_personalized([state.clients[0].generator], dataset)
    metrics = evaluate_personalized([c.generator for c in state.clients], dataset)
    assert len(metrics.per_class_recall) == dataset.num_classes
    assert 0.0 <= metrics.overall_accuracy <= 1.0
    assert np.isfinite(metrics.minority_recall)
