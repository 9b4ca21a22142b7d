"""
Dense-array computation core with reverse-mode differentiation.

Each operation takes Nodes, computes its forward value with numpy and returns a
new Node holding that value together with a closure that pushes the output
gradient back into the parents. Calling `backward` on a scalar Node runs the
closures in reverse topological order.

Shapes are explicit: all values are 2-D, and the only broadcasting allowed is
adding a [1 x n] bias row to an [m x n] matrix.
"""
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from errors import BatchError, BoundsError, ContractError, ShapeError
from utils import settings

_dtype: type = np.float64 if settings.FLOAT64 else np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-12


def get_dtype() -> type:
    return _dtype


def set_dtype(dtype: type) -> None:
    global _dtype
    _dtype = dtype


@contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Temporarily switch the default float type (float64 for gradient checks)."""
    previous = get_dtype()
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


class Node:
    """A value in the computation graph and the gradient accumulated for it."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: Sequence["Node"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, parents={len(self.parents)})"


def leaf(value, dtype: type | None = None) -> Node:
    """Wrap an array (parameter, input or constant) as a graph leaf."""
    array = np.array(value, dtype=dtype or get_dtype())
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    return Node(array)


def _require_2d(*nodes: Node) -> None:
    for n in nodes:
        if n.value.ndim != 2:
            raise ShapeError(f"expected a 2-D value, got shape {n.shape}")


def _require_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    _require_2d(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} x {b.shape}")

    def backward(g: np.ndarray) -> None:
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    return Node(a.value @ b.value, (a, b), backward)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; `b` may also be a [1 x n] bias row added to every row."""
    _require_2d(a, b)
    is_bias = a.shape != b.shape and b.shape == (1, a.shape[1])
    if not is_bias:
        _require_same_shape(a, b, "add")

    def backward(g: np.ndarray) -> None:
        a.grad += g
        if is_bias:
            b.grad += g.sum(axis=0, keepdims=True)
        else:
            b.grad += g

    return Node(a.value + b.value, (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "sub")

    def backward(g: np.ndarray) -> None:
        a.grad += g
        b.grad -= g

    return Node(a.value - b.value, (a, b), backward)


def mul_elem(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "mul_elem")

    def backward(g: np.ndarray) -> None:
        a.grad += g * b.value
        b.grad += g * a.value

    return Node(a.value * b.value, (a, b), backward)


def scale(a: Node, factor: float, shift: float = 0.0) -> Node:
    """Affine map factor * a + shift with constant coefficients."""

    def backward(g: np.ndarray) -> None:
        a.grad += factor * g

    return Node(factor * a.value + shift, (a,), backward)


def sigmoid(a: Node) -> Node:
    # tanh form saturates cleanly for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))

    def backward(g: np.ndarray) -> None:
        a.grad += g * s * (1.0 - s)

    return Node(s, (a,), backward)


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)

    def backward(g: np.ndarray) -> None:
        a.grad += g * (1.0 - t * t)

    return Node(t, (a,), backward)


def one_minus(a: Node) -> Node:
    def backward(g: np.ndarray) -> None:
        a.grad -= g

    return Node(1.0 - a.value, (a,), backward)


def relu(a: Node) -> Node:
    positive = a.value > 0

    def backward(g: np.ndarray) -> None:
        a.grad += g * positive

    return Node(np.where(positive, a.value, 0.0).astype(a.value.dtype), (a,), backward)


def square(a: Node) -> Node:
    def backward(g: np.ndarray) -> None:
        a.grad += 2.0 * g * a.value

    return Node(a.value * a.value, (a,), backward)


def sqrt_floor(a: Node, eps: float, ceiling: float = np.inf) -> Node:
    """sqrt(clip(a, eps, ceiling)); clamped entries receive no gradient."""
    clamped = (a.value < eps) | (a.value > ceiling)
    root = np.sqrt(np.clip(a.value, eps, ceiling))

    def backward(g: np.ndarray) -> None:
        a.grad += np.where(clamped, 0.0, g / (2.0 * root))

    return Node(root, (a,), backward)


def transpose(a: Node) -> Node:
    _require_2d(a)

    def backward(g: np.ndarray) -> None:
        a.grad += g.T

    return Node(np.ascontiguousarray(a.value.T), (a,), backward)


def sum_all(a: Node) -> Node:
    def backward(g: np.ndarray) -> None:
        a.grad += g[0, 0]

    return Node(np.array([[a.value.sum()]], dtype=a.value.dtype), (a,), backward)


def mean_all(a: Node) -> Node:
    count = a.value.size

    def backward(g: np.ndarray) -> None:
        a.grad += g[0, 0] / count

    return Node(np.array([[a.value.mean()]], dtype=a.value.dtype), (a,), backward)


def concat_cols(parts: Sequence[Node]) -> Node:
    if not parts:
        raise ShapeError("concat_cols: nothing to concatenate")
    _require_2d(*parts)
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row mismatch {p.shape[0]} vs {rows}")
    if len(parts) == 1:
        return parts[0]

    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g: np.ndarray) -> None:
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += g[:, start:stop]

    return Node(np.concatenate([p.value for p in parts], axis=1), parts, backward)


def gather_rows(table: Node, indices: np.ndarray) -> Node:
    """Row lookup; the backward pass scatter-adds into the looked-up rows."""
    _require_2d(table)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise BoundsError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )

    def backward(g: np.ndarray) -> None:
        np.add.at(table.grad, indices, g)

    return Node(table.value[indices], (table,), backward)


def take_elements(a: Node, rows: np.ndarray, cols: np.ndarray) -> Node:
    """Pick a[rows[i], cols[i]] into a [p x 1] column."""
    _require_2d(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g: np.ndarray) -> None:
        np.add.at(a.grad, (rows, cols), g[:, 0])

    return Node(a.value[rows, cols].reshape(-1, 1), (a,), backward)


@dataclass
class BatchNormState:
    """Running statistics for one batch-normalized block of columns."""

    running_mean: np.ndarray
    running_var: np.ndarray


def batch_norm(
    x: Node,
    state: BatchNormState,
    mode: str,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Node:
    """
    Normalize each column of x without a learnable affine part.

    In train mode the batch statistics are used and folded into the running
    statistics; in infer mode the running statistics are used.
    """
    _require_2d(x)
    m = x.shape[0]
    if mode == "train":
        if m < 2:
            raise BatchError(f"batch_norm needs at least 2 rows in train mode, got {m}")
        mean = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.value - mean) * inv_std

        unbiased = var * m / (m - 1)
        state.running_mean[:] = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var[:] = (1 - momentum) * state.running_var + momentum * unbiased

        def backward(g: np.ndarray) -> None:
            x.grad += (inv_std / m) * (
                m * g - g.sum(axis=0) - x_hat * (g * x_hat).sum(axis=0)
            )

        return Node(x_hat.astype(x.value.dtype), (x,), backward)

    if mode != "infer":
        raise ContractError(f"unknown batch_norm mode: {mode}")

    inv_std = 1.0 / np.sqrt(state.running_var + eps)
    y = ((x.value - state.running_mean) * inv_std).astype(x.value.dtype)

    def backward_infer(g: np.ndarray) -> None:
        x.grad += g * inv_std

    return Node(y, (x,), backward_infer)


def row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=1))


def l2_normalize(x: Node, eps: float = NORM_EPS) -> Node:
    _require_2d(x)
    norms = row_norms(x.value)
    denom = np.maximum(norms, eps)[:, None]
    y = x.value / denom
    floored = (norms < eps)[:, None]

    def backward(g: np.ndarray) -> None:
        projected = g - y * (g * y).sum(axis=1, keepdims=True)
        x.grad += np.where(floored, g, projected) / denom

    return Node(y, (x,), backward)


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean negative log-likelihood of integer labels under row-wise softmax."""
    _require_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    m, n_classes = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape} labels for {m} rows")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise BoundsError("softmax_cross_entropy: label outside the class range")

    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(m), labels].mean()

    def backward(g: np.ndarray) -> None:
        probs = np.exp(log_p)
        probs[np.arange(m), labels] -= 1.0
        logits.grad += g[0, 0] * probs / m

    return Node(np.array([[loss]], dtype=logits.value.dtype), (logits,), backward)


def topological_order(root: Node) -> list[Node]:
    """Nodes reachable from root, parents before children, each exactly once."""
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """
    Accumulate d(loss)/d(node) into every reachable node.

    Leaf gradients accumulate across calls; gradients of intermediate nodes are
    rebuilt on every call.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        if node.parents:
            node.grad.fill(0)
    loss.grad += 1
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
