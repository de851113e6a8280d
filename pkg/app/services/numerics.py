# app/services/numerics.py
"""
Минимальный движок плотных тензоров с обратным автодифференцированием.

Каждая примитивная операция возвращает новый Tensor, запоминая родителей и
функцию обратного прохода. Если ни один вход не требует градиента, результат
записывается как константа: так выражается остановка градиента (detach).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from app import config
from app.errors import NumericError, ShapeError, StructuralError

ArrayLike = np.ndarray | float | int | Sequence
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")
    # ndarray op Tensor уходит в __radd__/__rmul__ и т.д.
    __array_ufunc__ = None

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        op: str = "leaf",
    ):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() требует скаляр, получена форма {list(self.shape)}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> "ComputationRecord":
        record = ComputationRecord.trace(self)
        record.backward(seed)
        return record

    # Операторы
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x: "Tensor | ArrayLike") -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(values, op=op)


@dataclass
class ComputationRecord:
    """Топологически упорядоченный список узлов графа вычислений"""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)

    def backward(self, seed: np.ndarray | None = None) -> None:
        if not self.nodes:
            return
        root = self.nodes[-1]
        if seed is None:
            seed = np.ones_like(root.values)
        pending: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                # Градиенты накапливаются до явного zero_grad
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: несовместимые формы {list(a.shape)} и {list(b.shape)}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.values + b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.values - b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.values * b.values, (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.values / b.values
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)), "div",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: несовместимые формы {list(a.shape)} и {list(b.shape)}")
    return _make(
        a.values @ b.values, (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g), "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose поддерживает только матрицы")
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.values.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(a.values * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, floor: float = config.PROB_FLOOR) -> Tensor:
    """Логарифм с отсечкой снизу; ниже порога градиент нулевой"""
    a = as_tensor(a)
    clamped = np.maximum(a.values, floor)
    live = a.values > floor
    return _make(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),), "log")


def softmax(logits: Tensor) -> Tensor:
    """Softmax по последней оси с вычитанием максимума"""
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), backward, "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g: np.ndarray):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), backward, "log_softmax")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise StructuralError("take_rows: индекс строки вне диапазона")

    def backward(g: np.ndarray):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.values[index], (a,), backward, "take_rows")


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    rows = [as_tensor(r) for r in rows]
    if not rows:
        raise ShapeError("stack_rows: пустой список")
    width = rows[0].shape
    if any(r.shape != width for r in rows):
        raise ShapeError("stack_rows: строки разной формы")

    def backward(g: np.ndarray):
        return tuple(g[i] for i in range(len(rows)))

    return _make(np.stack([r.values for r in rows]), rows, backward, "stack")


def l2_normalize_rows(a: Tensor, eps: float = config.PROB_FLOOR) -> Tensor:
    norms = np.sqrt((a.values ** 2).sum(axis=-1, keepdims=True))
    safe = np.maximum(norms, eps)
    out = a.values / safe
    live = norms > eps

    def backward(g: np.ndarray):
        projected = g - out * (g * out).sum(axis=-1, keepdims=True)
        return (np.where(live, projected, g) / safe,)

    return _make(out, (a,), backward, "l2_normalize")


@dataclass(eq=False)
class CsrAdjacency:
    """Смежность в формате CSR: смещения строк и индексы столбцов"""

    indptr: np.ndarray
    indices: np.ndarray
    num_nodes: int

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indptr.shape != (self.num_nodes + 1,) or self.indptr[0] != 0 \
                or np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != self.indices.size:
            raise StructuralError("CSR: некорректный массив смещений строк")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.num_nodes):
            raise StructuralError("CSR: индекс соседа вне диапазона [0, N)")

    @classmethod
    def from_scipy(cls, matrix: sparse.spmatrix | sparse.sparray) -> "CsrAdjacency":
        csr = sparse.csr_matrix(matrix)
        csr.sort_indices()
        return cls(csr.indptr.copy(), csr.indices.copy(), csr.shape[0])

    def to_scipy(self) -> sparse.csr_matrix:
        data = np.ones(self.indices.size, dtype=np.float64)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.num_nodes, self.num_nodes))

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    @cached_property
    def mean_operator(self) -> sparse.csr_matrix:
        # Строка i: 1/deg(i) на соседях; у изолированных узлов строка пустая
        deg = self.degrees().astype(np.float64)
        scale = np.repeat(np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0), self.degrees())
        return sparse.csr_matrix((scale, self.indices, self.indptr), shape=(self.num_nodes, self.num_nodes))


def neighbor_mean_aggregate(node_feats: Tensor, adjacency: CsrAdjacency) -> Tensor:
    """Среднее по соседям для каждой строки; изолированный узел даёт нулевой вектор"""
    if node_feats.ndim != 2 or node_feats.shape[0] != adjacency.num_nodes:
        raise ShapeError(
            f"neighbor_mean_aggregate: {adjacency.num_nodes} узлов, признаки формы {list(node_feats.shape)}"
        )
    op = adjacency.mean_operator
    return _make(
        np.asarray(op @ node_feats.values), (node_feats,),
        lambda g: (np.asarray(op.T @ g),), "neighbor_mean",
    )


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = config.DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.values), np.zeros_like(param.values), **hyper)


def adam_step(param: Tensor, grad: Tensor | np.ndarray, state: AdamState) -> tuple[Tensor, AdamState]:
    """Один шаг Adam с коррекцией смещения; возвращает новые параметр и состояние"""
    g = grad.values if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape or state.first_moment.shape != param.shape \
            or state.second_moment.shape != param.shape:
        raise ShapeError(f"adam_step: форма параметра {list(param.shape)}, градиента {list(g.shape)}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    updated = param.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(
        m, v, t,
        learning_rate=state.learning_rate, beta1=state.beta1, beta2=state.beta2, epsilon=state.epsilon,
    )
    return Tensor(updated, requires_grad=param.requires_grad), new_state


def finite_difference_gradient(
    f: Callable[[Tensor], Tensor | float],
    x: Tensor | np.ndarray,
    h: float = config.GRAD_CHECK_STEP,
) -> Tensor:
    """Центральные разности (f(x+h e_i) - f(x-h e_i)) / 2h по каждой координате"""
    base = (x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)

    def evaluate(values: np.ndarray) -> float:
        value = f(Tensor(values))
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(value):
            raise NumericError("finite_difference_gradient: f вернула нечисловое значение")
        return value

    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = evaluate(base.copy())
        flat[i] = original - h
        minus = evaluate(base.copy())
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return Tensor(grad)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Относительная ошибка по норме: ||a - n|| / max(||a||, ||n||)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)
