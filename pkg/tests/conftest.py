# tests/conftest.py
import numpy as np
import pytest

from app.schemas import ExperimentConfig, SbmConfig, SplitSpec
from app.services.graphdata import FederationDataset, LocalGraph, build_adjacency, generate_sbm
from app.services.networks import GeneratorParams, ProjectionParams
from app.services.numerics import Tensor, finite_difference_gradient, relative_error
from app.services.state import ClientState, fresh_optimizer


def small_sbm(num_clients: int = 4, nodes: int = 60, seed: int = 0, **overrides) -> SbmConfig:
    params = dict(
        num_clients=num_clients,
        nodes_per_client=(nodes, nodes),
        num_classes=3,
        feature_dim=6,
        minority_fraction=0.1,
        p_intra=0.15,
        p_inter=0.02,
        separation=2.0,
        noise=0.5,
        seed=seed,
        split=SplitSpec(train=0.6, val=0.2, test=0.2, seed=seed),
    )
    params.update(overrides)
    return SbmConfig(**params)


def small_config(tmp_path=None, **overrides) -> ExperimentConfig:
    params = dict(
        sbm=small_sbm(),
        rounds=2,
        local_epochs=1,
        pre_epochs=1,
        feature_dim=8,
        seed=0,
    )
    if tmp_path is not None:
        params["out_dir"] = str(tmp_path / "run")
    params.update(overrides)
    return ExperimentConfig(**params)


def make_client(graph: LocalGraph, num_classes: int, client_id: int = 0, seed: int = 0,
                hidden: int = 8, feature_dim: int = 5, learning_rate: float = 0.01) -> ClientState:
    rng = np.random.default_rng([seed, client_id])
    generator = GeneratorParams.init(graph.feature_dim, num_classes, rng, hidden=hidden, feature_dim=feature_dim)
    projection = ProjectionParams.init(feature_dim, rng, hidden=hidden, out_dim=4)
    return ClientState(
        client_id=client_id,
        graph=graph,
        generator=generator,
        projection=projection,
        generator_opt=fresh_optimizer(generator, learning_rate),
        projection_opt=fresh_optimizer(projection, learning_rate),
        class_counts=graph.class_counts(num_classes),
    )


def tiny_graph(seed: int = 0, n: int = 12, d: int = 4, num_classes: int = 3) -> LocalGraph:
    """Маленький случайный граф: все классы представлены в train"""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    upper = np.triu(rng.random((n, n)) < 0.3, k=1)
    src, dst = np.nonzero(upper)
    train = np.zeros(n, dtype=bool)
    train[: n // 2] = True
    test = ~train
    return LocalGraph(
        adjacency=build_adjacency(n, src, dst),
        features=rng.standard_normal((n, d)),
        labels=labels,
        train_mask=train,
        val_mask=np.zeros(n, dtype=bool),
        test_mask=test,
        node_ids=np.arange(n, dtype=np.int64),
    )


def check_gradient(loss_fn, value: np.ndarray, tol: float = 1e-4) -> float:
    """Сравнить аналитический градиент loss_fn(Tensor) с центральными разностями"""
    x = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    loss_fn(x).backward()
    numeric = finite_difference_gradient(loss_fn, value)
    err = relative_error(x.grad, numeric.values)
    assert err < tol, f"relative error {err}"
    return err


@pytest.fixture
def sbm_dataset() -> FederationDataset:
    return generate_sbm(small_sbm())


@pytest.fixture
def graph() -> LocalGraph:
    return tiny_graph()


@pytest.fixture
def client(graph) -> ClientState:
    return make_client(graph, 3)


def sage_margin(generator: GeneratorParams, graph: LocalGraph) -> float:
    """Минимальный |предактивационный| отклик ReLU в обоих слоях GraphSAGE"""
    op = graph.adjacency.mean_operator
    h = graph.features
    margin = np.inf
    for prefix in ("sage1", "sage2"):
        pre = h @ generator[f"{prefix}.w_self"].values + (op @ h) @ generator[f"{prefix}.w_neigh"].values \
            + generator[f"{prefix}.bias"].values
        margin = min(margin, float(np.abs(pre).min()))
        h = np.maximum(pre, 0.0)
    return margin


def mlp_margin(bundle, x: np.ndarray, prefixes) -> float:
    """То же для MLP с ReLU после каждого слоя из prefixes"""
    h = np.asarray(x, dtype=np.float64)
    margin = np.inf
    for prefix in prefixes:
        pre = h @ bundle[f"{prefix}.weight"].values + bundle[f"{prefix}.bias"].values
        margin = min(margin, float(np.abs(pre).min()))
        h = np.maximum(pre, 0.0)
    return margin


def away_from_kinks(build, margin_fn, seed: int, margin: float = 1e-3, attempts: int = 100):
    """Первый экземпляр build(seed'), у которого ReLU не у излома: конечные разности корректны"""
    for offset in range(attempts):
        instance = build(seed * 1000 + offset)
        if margin_fn(instance) > margin:
            return instance
    raise AssertionError("не найден экземпляр вдали от изломов ReLU")


def with_random_biases(bundle, rng: np.random.Generator, scale: float = 0.5):
    """Ненулевые смещения, чтобы нулевые входы ReLU не давали предактивацию ровно 0"""
    arrays = bundle.arrays()
    for name, value in arrays.items():
        if name.endswith("bias"):
            arrays[name] = scale * rng.standard_normal(value.shape)
    return type(bundle).from_arrays(arrays)
