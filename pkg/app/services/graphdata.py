# app/services/graphdata.py
import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import sparse

from app import config
from app.errors import ConfigurationError, ParseError, StructuralError
from app.schemas import SbmConfig, SplitSpec
from app.services.numerics import CsrAdjacency, Tensor

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(eq=False)
class LocalGraph:
    """Приватный подграф клиента: смежность, признаки, метки и маски"""

    adjacency: CsrAdjacency
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    node_ids: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.adjacency.num_nodes

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def features_tensor(self) -> Tensor:
        return Tensor(self.features)

    def class_counts(self, num_classes: int) -> np.ndarray:
        """|D_m^h| по обучающей маске"""
        return np.bincount(self.labels[self.train_mask], minlength=num_classes).astype(np.int64)

    def validate(self, num_classes: int) -> None:
        n = self.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise StructuralError("Матрица признаков не совпадает с числом узлов")
        if self.labels.shape != (n,) or (n and (self.labels.min() < 0 or self.labels.max() >= num_classes)):
            raise StructuralError(f"Метки должны лежать в [0, {num_classes})")
        masks = np.stack([self.train_mask, self.val_mask, self.test_mask]).astype(np.int64)
        if masks.shape != (3, n) or np.any(masks.sum(axis=0) > 1):
            raise StructuralError("Маски train/val/test должны быть непересекающимися")
        adj = self.adjacency.to_scipy()
        if (adj != adj.T).nnz:
            raise StructuralError("Смежность должна быть симметричной")
        if adj.diagonal().any():
            raise StructuralError("Смежность не должна содержать петель")

    def induced_subgraph(self, nodes: np.ndarray) -> "LocalGraph":
        """Подграф на узлах nodes; рёбра наружу отбрасываются"""
        nodes = np.asarray(nodes, dtype=np.int64)
        sub = self.adjacency.to_scipy()[nodes][:, nodes]
        return LocalGraph(
            adjacency=CsrAdjacency.from_scipy(sub),
            features=self.features[nodes].copy(),
            labels=self.labels[nodes].copy(),
            train_mask=self.train_mask[nodes].copy(),
            val_mask=self.val_mask[nodes].copy(),
            test_mask=self.test_mask[nodes].copy(),
            node_ids=self.node_ids[nodes].copy(),
        )


@dataclass(eq=False)
class FederationDataset:
    clients: list[LocalGraph]
    num_classes: int
    minority_classes: tuple[int, ...]

    def validate(self) -> None:
        if not self.clients:
            raise ConfigurationError("Федерация без клиентов")
        dims = {g.feature_dim for g in self.clients}
        if len(dims) != 1:
            raise StructuralError(f"У клиентов разная размерность признаков: {sorted(dims)}")
        minority = set(self.minority_classes)
        if not minority or not minority < set(range(self.num_classes)):
            raise ConfigurationError("minority_classes должно быть непустым собственным подмножеством [0, H)")
        for graph in self.clients:
            graph.validate(self.num_classes)

    @property
    def feature_dim(self) -> int:
        return self.clients[0].feature_dim


def build_adjacency(num_nodes: int, src: np.ndarray, dst: np.ndarray) -> CsrAdjacency:
    """Симметризация, удаление петель и дублей"""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
        raise StructuralError("Ребро ссылается на несуществующий узел")
    keep = src != dst
    src, dst = src[keep], dst[keep]
    ones = np.ones(src.size, dtype=np.float64)
    coo = sparse.coo_matrix((ones, (src, dst)), shape=(num_nodes, num_nodes))
    sym = (coo + coo.T).tocsr()
    sym.sum_duplicates()
    sym.data[:] = 1.0
    return CsrAdjacency.from_scipy(sym)


def hashed_split(node_ids: np.ndarray, split: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Детерминированное разбиение по хешу (seed, node_id)"""
    u = np.empty(len(node_ids), dtype=np.float64)
    for i, node_id in enumerate(node_ids):
        digest = hashlib.blake2b(f"{split.seed}:{int(node_id)}".encode(), digest_size=8).digest()
        u[i] = int.from_bytes(digest, "big") / 2.0**64
    train = u < split.train
    val = ~train & (u < split.train + split.val)
    return train, val, ~(train | val)


def _read_rows(path: str | Path) -> Iterator[tuple[int, list[str]]]:
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            fields = [f.strip() for f in row]
            if not fields or all(not f for f in fields):
                continue
            yield line_no, fields


def _numeric_rows(path: str | Path, parse_first) -> Iterator[tuple[int, list[str]]]:
    """Строки CSV; первая строка, не разбираемая как число, считается заголовком"""
    for line_no, fields in _read_rows(path):
        try:
            parse_first(fields[0])
        except ValueError:
            if line_no == 1:
                continue
            raise ParseError(f"не число: {fields[0]!r}", line_no, str(path)) from None
        yield line_no, fields


def _parse_int(value: str, line_no: int, path: str | Path) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"ожидалось целое, получено {value!r}", line_no, str(path)) from None


def _parse_float(value: str, line_no: int, path: str | Path) -> float:
    try:
        return float(value)
    except ValueError:
        raise ParseError(f"ожидалось число, получено {value!r}", line_no, str(path)) from None


def load_csv_graph(
    edges_path: str | Path,
    features_path: str | Path,
    labels_path: str | Path,
    split: SplitSpec | None = None,
    num_classes: Optional[int] = None,
    split_path: str | Path | None = None,
) -> LocalGraph:
    """Прочитать граф из трёх CSV (рёбра, признаки, метки)"""
    split = split or SplitSpec()

    feature_rows: dict[int, list[float]] = {}
    width: Optional[int] = None
    for line_no, fields in _numeric_rows(features_path, int):
        node_id = _parse_int(fields[0], line_no, features_path)
        values = [_parse_float(v, line_no, features_path) for v in fields[1:]]
        if width is None:
            width = len(values)
        if len(values) != width or width == 0:
            raise ParseError(f"ожидалось {width} признаков, получено {len(values)}", line_no, str(features_path))
        if node_id in feature_rows:
            raise StructuralError(f"Повторный node_id {node_id} в {features_path}")
        feature_rows[node_id] = values
    if not feature_rows:
        raise StructuralError(f"Файл признаков {features_path} пуст")

    node_ids = np.array(sorted(feature_rows), dtype=np.int64)
    position = {int(nid): i for i, nid in enumerate(node_ids)}
    features = np.array([feature_rows[int(nid)] for nid in node_ids], dtype=np.float64)

    labels = np.full(len(node_ids), -1, dtype=np.int64)
    for line_no, fields in _numeric_rows(labels_path, int):
        if len(fields) != 2:
            raise ParseError("ожидалось node_id,label", line_no, str(labels_path))
        node_id = _parse_int(fields[0], line_no, labels_path)
        label = _parse_int(fields[1], line_no, labels_path)
        if node_id not in position:
            raise StructuralError(f"Метка для неизвестного узла {node_id}")
        if labels[position[node_id]] != -1:
            raise StructuralError(f"Повторный node_id {node_id} в {labels_path}")
        labels[position[node_id]] = label
    if np.any(labels < 0):
        missing = node_ids[labels < 0][:5].tolist()
        raise StructuralError(f"Нет меток для узлов {missing}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.max() >= num_classes:
        raise StructuralError(f"Метка {int(labels.max())} вне диапазона [0, {num_classes})")

    src: list[int] = []
    dst: list[int] = []
    for line_no, fields in _numeric_rows(edges_path, int):
        if len(fields) != 2:
            raise ParseError("ожидалось src,dst", line_no, str(edges_path))
        u = _parse_int(fields[0], line_no, edges_path)
        v = _parse_int(fields[1], line_no, edges_path)
        if u not in position or v not in position:
            raise StructuralError(f"Ребро ({u},{v}) ссылается на отсутствующий узел (строка {line_no})")
        src.append(position[u])
        dst.append(position[v])
    adjacency = build_adjacency(len(node_ids), np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64))

    if split_path is not None:
        train, val, test = _read_split_file(split_path, position)
    else:
        train, val, test = hashed_split(node_ids, split)

    graph = LocalGraph(adjacency, features, labels, train, val, test, node_ids)
    graph.validate(num_classes)
    return graph


def _read_split_file(path: str | Path, position: dict[int, int]):
    masks = {name: np.zeros(len(position), dtype=bool) for name in SPLIT_NAMES}
    for line_no, fields in _numeric_rows(path, int):
        if len(fields) != 2 or fields[1] not in masks:
            raise ParseError("ожидалось node_id,{train|val|test}", line_no, str(path))
        node_id = _parse_int(fields[0], line_no, path)
        if node_id not in position:
            raise StructuralError(f"Разбиение для неизвестного узла {node_id}")
        masks[fields[1]][position[node_id]] = True
    return masks["train"], masks["val"], masks["test"]


def resolve_minority_classes(
    labels: np.ndarray, num_classes: int, explicit: Optional[Sequence[int]] = None
) -> tuple[int, ...]:
    """Явный список или классы с частотой ниже 1/H"""
    if explicit is not None:
        minority = tuple(sorted(set(int(c) for c in explicit)))
    else:
        freq = np.bincount(labels, minlength=num_classes) / max(len(labels), 1)
        minority = tuple(int(c) for c in np.flatnonzero(freq < 1.0 / num_classes))
    if not minority or len(minority) >= num_classes or min(minority) < 0 or max(minority) >= num_classes:
        raise ConfigurationError(f"Некорректный набор миноритарных классов: {minority}")
    return minority


def _largest_remainder(total: int, fractions: np.ndarray) -> np.ndarray:
    raw = total * fractions
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    # Остаток по убыванию дробной части, при равенстве меньший класс
    order = sorted(range(len(fractions)), key=lambda c: (-(raw[c] - counts[c]), c))
    for c in order[:short]:
        counts[c] += 1
    return counts


def partition_clients(
    global_graph: LocalGraph,
    num_clients: int,
    size_range: tuple[int, int] = config.DEFAULT_SIZE_RANGE,
    seed: int = 0,
    num_classes: Optional[int] = None,
    minority_classes: Optional[Sequence[int]] = None,
) -> FederationDataset:
    """Стратифицированное разбиение глобального графа на подграфы клиентов"""
    low, high = size_range
    n = global_graph.num_nodes
    if num_clients < 1 or low < 1 or high < low:
        raise ConfigurationError(f"Некорректные параметры разбиения: {num_clients} клиентов, {size_range}")
    if num_clients * low > n:
        raise ConfigurationError(f"{num_clients} x {low} узлов больше, чем {n} узлов графа")
    num_classes = num_classes or int(global_graph.labels.max()) + 1
    rng = np.random.default_rng(seed)

    cap = min(high, n // num_clients)
    sizes = rng.integers(low, cap + 1, size=num_clients)

    fractions = np.bincount(global_graph.labels, minlength=num_classes) / n
    pools = [rng.permutation(np.flatnonzero(global_graph.labels == c)) for c in range(num_classes)]
    cursor = np.zeros(num_classes, dtype=np.int64)

    clients: list[LocalGraph] = []
    for size in sizes:
        quota = _largest_remainder(int(size), fractions)
        chosen: list[np.ndarray] = []
        deficit = 0
        for c in range(num_classes):
            available = len(pools[c]) - cursor[c]
            take = min(int(quota[c]), int(available))
            deficit += int(quota[c]) - take
            chosen.append(pools[c][cursor[c]:cursor[c] + take])
            cursor[c] += take
        # Недостачу добираем из самых частых классов
        for c in np.argsort(-fractions, kind="stable"):
            if deficit == 0:
                break
            take = min(deficit, len(pools[c]) - int(cursor[c]))
            chosen.append(pools[c][cursor[c]:cursor[c] + take])
            cursor[c] += take
            deficit -= take
        nodes = np.sort(np.concatenate(chosen))
        clients.append(global_graph.induced_subgraph(nodes))

    minority = resolve_minority_classes(global_graph.labels, num_classes, minority_classes)
    dataset = FederationDataset(clients, num_classes, minority)
    dataset.validate()
    logger.info("Разбиение: %d клиентов, размеры %s", num_clients, sizes.tolist())
    return dataset


def _stratified_masks(labels: np.ndarray, split: SplitSpec, rng: np.random.Generator):
    n = len(labels)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(split.train * len(idx)))
        n_val = int(round(split.val * len(idx)))
        n_val = min(n_val, len(idx) - n_train)
        train[idx[:n_train]] = True
        val[idx[n_train:n_train + n_val]] = True
        test[idx[n_train + n_val:]] = True
    return train, val, test


def generate_sbm(cfg: SbmConfig, seed: Optional[int] = None) -> FederationDataset:
    """Федерация из графов стохастической блочной модели с гауссовыми признаками"""
    seed = cfg.seed if cfg.seed is not None else (seed or 0)
    rng = np.random.default_rng(seed)
    H, d = cfg.num_classes, cfg.feature_dim
    proportions = np.array(cfg.proportions())

    directions = rng.standard_normal((H, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    class_means = cfg.separation * directions

    clients: list[LocalGraph] = []
    low, high = cfg.nodes_per_client
    for _ in range(cfg.num_clients):
        n = int(rng.integers(low, high + 1))
        counts = _largest_remainder(n, proportions)
        labels = rng.permutation(np.repeat(np.arange(H), counts))

        same = labels[:, None] == labels[None, :]
        prob = np.where(same, cfg.p_intra, cfg.p_inter)
        upper = np.triu(rng.random((n, n)) < prob, k=1)
        src, dst = np.nonzero(upper)
        adjacency = build_adjacency(n, src, dst)

        shift = rng.standard_normal(d)
        shift *= cfg.client_shift / max(np.linalg.norm(shift), config.PROB_FLOOR)
        features = class_means[labels] + shift + cfg.noise * rng.standard_normal((n, d))

        train, val, test = _stratified_masks(labels, cfg.split, rng)
        clients.append(LocalGraph(adjacency, features, labels, train, val, test, np.arange(n, dtype=np.int64)))

    minority = tuple(int(c) for c in np.flatnonzero(proportions < 1.0 / H))
    dataset = FederationDataset(clients, H, minority)
    dataset.validate()
    return dataset


def save_federation(dataset: FederationDataset, out_dir: str | Path) -> Path:
    """Записать федерацию в каталог: manifest.json + CSV на клиента"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, graph in enumerate(dataset.clients):
        name = f"client_{i}"
        names.append(name)
        folder = out / name
        folder.mkdir(exist_ok=True)
        adj = graph.adjacency
        with open(folder / "edges.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["src", "dst"])
            for u in range(adj.num_nodes):
                for v in adj.neighbors(u):
                    if u < v:
                        writer.writerow([int(graph.node_ids[u]), int(graph.node_ids[v])])
        with open(folder / "features.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node_id"] + [f"f{j}" for j in range(graph.feature_dim)])
            for nid, row in zip(graph.node_ids.tolist(), graph.features.tolist()):
                # repr(float) восстанавливается побитово
                writer.writerow([nid] + [repr(v) for v in row])
        with open(folder / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node_id", "label"])
            writer.writerows(zip(graph.node_ids.tolist(), graph.labels.tolist()))
        with open(folder / "split.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node_id", "split"])
            for i_node, nid in enumerate(graph.node_ids.tolist()):
                for split_name, mask in zip(SPLIT_NAMES, (graph.train_mask, graph.val_mask, graph.test_mask)):
                    if mask[i_node]:
                        writer.writerow([nid, split_name])
    manifest = {
        "num_classes": dataset.num_classes,
        "minority_classes": list(dataset.minority_classes),
        "feature_dim": dataset.feature_dim,
        "clients": names,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    logger.info("Набор данных записан в %s", out)
    return out


def load_federation(data_dir: str | Path) -> FederationDataset:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"Нет {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    num_classes = int(manifest["num_classes"])
    clients = []
    for name in manifest["clients"]:
        folder = root / name
        clients.append(load_csv_graph(
            folder / "edges.csv", folder / "features.csv", folder / "labels.csv",
            num_classes=num_classes, split_path=folder / "split.csv",
        ))
    dataset = FederationDataset(clients, num_classes, tuple(manifest["minority_classes"]))
    dataset.validate()
    return dataset
