# app/services/networks.py
"""
Параметризованные сети: генератор клиента (GraphSAGE + классификатор +
адаптационный слой), дискриминатор кластера и проекционная голова.
"""
import json
import math
from pathlib import Path
from typing import ClassVar, Iterator, Sequence

import numpy as np

from app import config
from app.errors import ConfigurationError, ShapeError
from app.schemas import CheckpointBlob, TensorBlob
from app.services.graphdata import LocalGraph
from app.services.numerics import (
    Tensor,
    add,
    l2_normalize_rows,
    matmul,
    neighbor_mean_aggregate,
    relu,
    softmax,
)

# Потоки ГСЧ для инициализации
GENERATOR_STREAM = 0
PROJECTION_STREAM = 1
DISCRIMINATOR_STREAM = 2
SERVER_OWNER = 2**31


def model_rng(seed: int, owner: int, stream: int) -> np.random.Generator:
    """Независимый поток для пары (global_seed, владелец)"""
    return np.random.default_rng([seed, owner, stream])


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamBundle:
    """Именованный набор тензоров-параметров с семантикой значения"""

    KIND: ClassVar[str] = "bundle"

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]):
        bundle = cls({name: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
                      for name, v in arrays.items()})
        bundle.check_layout()
        return bundle

    def copy(self):
        return type(self).from_arrays({n: v.copy() for n, v in self.arrays().items()})

    def frozen(self):
        """Копия без градиентов: рассылаемые сервером параметры"""
        return type(self)({n: Tensor(v.copy()) for n, v in self.arrays().items()})

    def replace(self, updates: dict[str, Tensor]):
        merged = dict(self.tensors)
        merged.update(updates)
        return type(self)(merged)

    def scaled(self, factor: float):
        return type(self).from_arrays({n: v * factor for n, v in self.arrays().items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_elements(self, names: Sequence[str] | None = None) -> int:
        names = self.names() if names is None else names
        return sum(self.tensors[n].values.size for n in names)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.values)) for t in self.tensors.values())

    def check_layout(self) -> None:
        """Проверка согласованности размерностей (переопределяется)"""

    def equals(self, other: "ParamBundle") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n].values, other[n].values) for n in self.names()
        )


def weighted_average(bundles: Sequence[ParamBundle], weights: Sequence[float],
                     names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Σ w_i θ_i по выбранным тензорам; суммирование в порядке списка"""
    if not bundles or len(bundles) != len(weights):
        raise ConfigurationError("weighted_average: пустой список или несовпадение длин")
    names = bundles[0].names() if names is None else list(names)
    out = {}
    for name in names:
        acc = np.zeros_like(bundles[0][name].values)
        for bundle, w in zip(bundles, weights):
            acc = acc + w * bundle[name].values
        out[name] = acc
    return out


def _linear(x: Tensor, bundle: ParamBundle, prefix: str) -> Tensor:
    return add(matmul(x, bundle[f"{prefix}.weight"]), bundle[f"{prefix}.bias"])


class GeneratorParams(ParamBundle):
    KIND = "generator"
    BACKBONE_AND_HEAD = (
        "sage1.w_self", "sage1.w_neigh", "sage1.bias",
        "sage2.w_self", "sage2.w_neigh", "sage2.bias",
        "classifier.weight", "classifier.bias",
    )
    ADAPTER = ("adapter.weight", "adapter.bias")

    @classmethod
    def init(cls, in_dim: int, num_classes: int, rng: np.random.Generator,
             hidden: int = config.HIDDEN_DIM, feature_dim: int = config.FEATURE_DIM) -> "GeneratorParams":
        arrays = {
            "sage1.w_self": glorot(rng, in_dim, hidden),
            "sage1.w_neigh": glorot(rng, in_dim, hidden),
            "sage1.bias": np.zeros(hidden),
            "sage2.w_self": glorot(rng, hidden, hidden),
            "sage2.w_neigh": glorot(rng, hidden, hidden),
            "sage2.bias": np.zeros(hidden),
            "classifier.weight": glorot(rng, hidden, num_classes),
            "classifier.bias": np.zeros(num_classes),
            "adapter.weight": glorot(rng, hidden, feature_dim),
            "adapter.bias": np.zeros(feature_dim),
        }
        return cls.from_arrays(arrays)

    @property
    def in_dim(self) -> int:
        return self["sage1.w_self"].shape[0]

    @property
    def num_classes(self) -> int:
        return self["classifier.weight"].shape[1]

    @property
    def feature_dim(self) -> int:
        return self["adapter.weight"].shape[1]

    def check_layout(self) -> None:
        d_in, hidden = self["sage1.w_self"].shape
        expected = {
            "sage1.w_neigh": (d_in, hidden),
            "sage1.bias": (hidden,),
            "sage2.w_self": (hidden, hidden),
            "sage2.w_neigh": (hidden, hidden),
            "sage2.bias": (hidden,),
            "classifier.bias": (self["classifier.weight"].shape[1],),
            "adapter.bias": (self["adapter.weight"].shape[1],),
        }
        if self["classifier.weight"].shape[0] != hidden or self["adapter.weight"].shape[0] != hidden:
            raise ShapeError("Генератор: голова и адаптер должны принимать скрытый слой")
        for name, shape in expected.items():
            if self[name].shape != shape:
                raise ShapeError(f"Генератор: {name} имеет форму {list(self[name].shape)}, ожидалась {list(shape)}")


class DiscriminatorParams(ParamBundle):
    KIND = "discriminator"

    @classmethod
    def init(cls, feature_dim: int, num_classes: int, rng: np.random.Generator,
             hidden: int = config.HIDDEN_DIM) -> "DiscriminatorParams":
        return cls.from_arrays({
            "layer1.weight": glorot(rng, feature_dim, hidden),
            "layer1.bias": np.zeros(hidden),
            "layer2.weight": glorot(rng, hidden, hidden),
            "layer2.bias": np.zeros(hidden),
            "layer3.weight": glorot(rng, hidden, num_classes),
            "layer3.bias": np.zeros(num_classes),
        })

    @property
    def feature_dim(self) -> int:
        return self["layer1.weight"].shape[0]

    def check_layout(self) -> None:
        w1, w2, w3 = self["layer1.weight"], self["layer2.weight"], self["layer3.weight"]
        if w1.shape[1] != w2.shape[0] or w2.shape[1] != w3.shape[0]:
            raise ShapeError("Дискриминатор: слои не стыкуются")


class ProjectionParams(ParamBundle):
    KIND = "projection"

    @classmethod
    def init(cls, feature_dim: int, rng: np.random.Generator, hidden: int = config.HIDDEN_DIM,
             out_dim: int = config.PROJECTION_DIM) -> "ProjectionParams":
        return cls.from_arrays({
            "hidden.weight": glorot(rng, feature_dim, hidden),
            "hidden.bias": np.zeros(hidden),
            "out.weight": glorot(rng, hidden, out_dim),
            "out.bias": np.zeros(out_dim),
        })

    @property
    def feature_dim(self) -> int:
        return self["hidden.weight"].shape[0]

    def check_layout(self) -> None:
        if self["hidden.weight"].shape[1] != self["out.weight"].shape[0]:
            raise ShapeError("Проекционная голова: слои не стыкуются")


BUNDLE_TYPES: dict[str, type[ParamBundle]] = {
    cls.KIND: cls for cls in (GeneratorParams, DiscriminatorParams, ProjectionParams)
}


def _sage_layer(h: Tensor, graph: LocalGraph, params: GeneratorParams, prefix: str) -> Tensor:
    neigh = neighbor_mean_aggregate(h, graph.adjacency)
    pre = add(add(matmul(h, params[f"{prefix}.w_self"]), matmul(neigh, params[f"{prefix}.w_neigh"])),
              params[f"{prefix}.bias"])
    return relu(pre)


def sage_forward(params: GeneratorParams, graph: LocalGraph) -> Tensor:
    """Двухслойный GraphSAGE с mean-агрегацией, выход N×64"""
    if graph.feature_dim != params.in_dim:
        raise ShapeError(f"Ширина признаков {graph.feature_dim}, генератор ждёт {params.in_dim}")
    h1 = _sage_layer(graph.features_tensor, graph, params, "sage1")
    return _sage_layer(h1, graph, params, "sage2")


def generator_forward(params: GeneratorParams, graph: LocalGraph) -> tuple[Tensor, Tensor]:
    """(логиты классов N×H, синтетические признаки lz̃ N×d_z) с общим backbone"""
    h = sage_forward(params, graph)
    return _linear(h, params, "classifier"), _linear(h, params, "adapter")


def discriminator_forward(params: DiscriminatorParams, feats: Tensor) -> Tensor:
    if feats.ndim != 2 or feats.shape[1] != params.feature_dim:
        raise ShapeError(f"Дискриминатор ждёт ширину {params.feature_dim}, получено {list(feats.shape)}")
    h = relu(_linear(feats, params, "layer1"))
    h = relu(_linear(h, params, "layer2"))
    return softmax(_linear(h, params, "layer3"))


def projection_forward(params: ProjectionParams, feats: Tensor) -> Tensor:
    if feats.ndim != 2 or feats.shape[1] != params.feature_dim:
        raise ShapeError(f"Проекция ждёт ширину {params.feature_dim}, получено {list(feats.shape)}")
    return _linear(relu(_linear(feats, params, "hidden")), params, "out")


def project_normalized(params: ProjectionParams, feats: Tensor) -> Tensor:
    """f(·): проекция и L2-нормировка строк"""
    return l2_normalize_rows(projection_forward(params, feats))


def save_checkpoint(bundle: ParamBundle, path: str | Path) -> Path:
    blob = CheckpointBlob(
        kind=bundle.KIND,
        tensors=[TensorBlob(name=n, shape=list(t.shape), values=t.values.reshape(-1).tolist())
                 for n, t in bundle.items()],
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(blob.model_dump()))
    return path


def load_checkpoint(path: str | Path) -> ParamBundle:
    """Загрузить набор параметров; тип определяется полем kind"""
    blob = CheckpointBlob.model_validate_json(Path(path).read_text())
    arrays = {t.name: np.array(t.values, dtype=np.float64).reshape(t.shape) for t in blob.tensors}
    return BUNDLE_TYPES[blob.kind].from_arrays(arrays)
