"""Dense matrix kernel with reverse-mode gradient accumulation.

Everything is a 2-D numpy array. A :class:`Tape` records each primitive in
execution order (a Wengert list), so replaying it backward visits every
node after all of its consumers; gradients are accumulated into the
:class:`ParamSet` that owns the learnable matrices. The primitive set is
exactly what the Q-network stack needs: matmul, transpose, bias add,
elementwise add/sub/mul, scale, relu, masked row-softmax, column concat
and row/column slicing. There is no batching — one tape forwards one
state matrix.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, InputError, NumericalError, ShapeError, StateError


class Node:
    """One matrix-valued intermediate of a recorded computation."""

    __slots__ = ("value", "grad", "_push")

    def __init__(self, value: np.ndarray, push: Callable[[np.ndarray], None] | None = None):
        self.value = value
        self.grad: np.ndarray | None = None
        self._push = push

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]


class Tape:
    """Execution-ordered record of primitives, replayed in reverse."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _emit(self, value: np.ndarray, push: Callable[[np.ndarray], None] | None) -> Node:
        node = Node(value, push)
        self.nodes.append(node)
        return node

    def backward(self, root: Node, seed: float = 1.0) -> None:
        """Accumulate d(root)/d(param) for every parameter on the tape.

        ``root`` must be a 1x1 node produced by this tape.
        """
        if not self.nodes:
            raise StateError("backward called on an empty tape")
        if root not in self.nodes:
            raise StateError("root node was not recorded on this tape")
        if root.value.shape != (1, 1):
            raise ShapeError(f"loss must be 1x1, got {root.value.shape}")
        root.grad = np.full_like(root.value, seed)
        for node in reversed(self.nodes):
            if node.grad is not None and node._push is not None:
                node._push(node.grad)


def _accum(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def glorot_uniform(shape: tuple[int, int], rng: np.random.Generator,
                   dtype: np.dtype = np.float64) -> np.ndarray:
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ParamSet:
    """Named learnable matrices plus parallel gradient accumulators."""

    def __init__(self, dtype: np.dtype = np.float64):
        self.dtype = np.dtype(dtype)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self.values:
            raise ConfigError(f"parameter {name!r} already exists")
        if array.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got {array.ndim}-D")
        self.values[name] = np.ascontiguousarray(array, dtype=self.dtype)
        self.grads[name] = np.zeros_like(self.values[name])

    def leaf(self, tape: Tape, name: str) -> Node:
        """Enter a parameter on the tape; its gradient lands in ``grads``."""
        sink = self.grads[name]

        def push(g: np.ndarray) -> None:
            np.add(sink, g, out=sink)

        node = Node(self.values[name], push)
        tape.nodes.append(node)
        return node

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy_values_from(self, other: "ParamSet") -> None:
        for name, arr in other.values.items():
            self.values[name][...] = arr

    def clone(self) -> "ParamSet":
        out = ParamSet(self.dtype)
        for name, arr in self.values.items():
            out.add(name, arr.copy())
        return out

    def save(self, path: str) -> None:
        """Dump every parameter to a compressed .npz archive (lossless)."""
        np.savez_compressed(path, **self.values)

    @classmethod
    def load(cls, path: str) -> "ParamSet":
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
        if not arrays:
            raise InputError(f"checkpoint {path!r} holds no parameters")
        dtype = next(iter(arrays.values())).dtype
        out = cls(dtype)
        for name in sorted(arrays):
            out.add(name, arrays[name])
        return out


def sgd_step(params: ParamSet, learning_rate: float) -> None:
    """Plain gradient descent: param -= lr * grad, then zero the grads."""
    for name, grad in params.grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        params.values[name] -= learning_rate * grad
    params.zero_grads()


# --- primitives ---------------------------------------------------------


def constant(tape: Tape, array: np.ndarray, dtype: np.dtype | None = None) -> Node:
    arr = np.asarray(array, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"constants must be 2-D, got {arr.ndim}-D")
    return tape._emit(arr, None)


def matmul(tape: Tape, a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}: inner dims differ")
    value = a.value @ b.value

    def push(g: np.ndarray) -> None:
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return tape._emit(value, push)


def transpose(tape: Tape, a: Node) -> Node:
    def push(g: np.ndarray) -> None:
        _accum(a, g.T)

    return tape._emit(np.ascontiguousarray(a.value.T), push)


def add(tape: Tape, a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add {a.shape} + {b.shape}: shapes differ")

    def push(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return tape._emit(a.value + b.value, push)


def sub(tape: Tape, a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"sub {a.shape} - {b.shape}: shapes differ")

    def push(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return tape._emit(a.value - b.value, push)


def mul(tape: Tape, a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"mul {a.shape} * {b.shape}: shapes differ")

    def push(g: np.ndarray) -> None:
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return tape._emit(a.value * b.value, push)


def scale(tape: Tape, a: Node, factor: float) -> Node:
    def push(g: np.ndarray) -> None:
        _accum(a, factor * g)

    return tape._emit(factor * a.value, push)


def add_bias(tape: Tape, x: Node, bias: Node) -> Node:
    """Add a 1 x k bias row to every row of x."""
    if bias.shape[0] != 1 or bias.shape[1] != x.shape[1]:
        raise ShapeError(f"bias {bias.shape} does not broadcast over {x.shape}")

    def push(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(bias, g.sum(axis=0, keepdims=True))

    return tape._emit(x.value + bias.value, push)


def relu(tape: Tape, a: Node) -> Node:
    value = np.maximum(a.value, 0.0)

    def push(g: np.ndarray) -> None:
        _accum(a, g * (value > 0))

    return tape._emit(value, push)


def masked_softmax(tape: Tape, logits: Node, key_mask: np.ndarray) -> Node:
    """Row-wise softmax over the columns flagged active in ``key_mask``.

    Masked columns get exactly zero weight; each row sums to 1 over the
    active columns.
    """
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.shape != (logits.shape[1],):
        raise ShapeError(
            f"mask length {key_mask.shape} does not match {logits.shape[1]} columns"
        )
    if not key_mask.any():
        raise InputError("masked_softmax: every key column is masked out")
    shifted = logits.value - logits.value[:, key_mask].max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights[:, ~key_mask] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)

    def push(g: np.ndarray) -> None:
        inner = (g * weights).sum(axis=1, keepdims=True)
        _accum(logits, weights * (g - inner))

    return tape._emit(weights, push)


def concat_cols(tape: Tape, parts: Iterable[Node]) -> Node:
    parts = list(parts)
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: all parts need the same row count")
    value = np.concatenate([p.value for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def push(g: np.ndarray) -> None:
        for part, lo, hi in zip(parts, offsets, offsets[1:]):
            _accum(part, g[:, lo:hi])

    return tape._emit(value, push)


def row_slice(tape: Tape, a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"row_slice [{start}:{stop}] outside {a.shape[0]} rows")

    def push(g: np.ndarray) -> None:
        full = np.zeros_like(a.value)
        full[start:stop] = g
        _accum(a, full)

    return tape._emit(a.value[start:stop].copy(), push)


def col_slice(tape: Tape, a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"col_slice [{start}:{stop}] outside {a.shape[1]} columns")

    def push(g: np.ndarray) -> None:
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        _accum(a, full)

    return tape._emit(a.value[:, start:stop].copy(), push)


def sum_all(tape: Tape, a: Node) -> Node:
    def push(g: np.ndarray) -> None:
        _accum(a, np.full_like(a.value, g[0, 0]))

    return tape._emit(a.value.sum().reshape(1, 1), push)


# --- layers -------------------------------------------------------------


def rff_forward(tape: Tape, x: Node, w: Node, b: Node) -> Node:
    """Row-wise feedforward layer relu(xW + b); rows are independent."""
    return relu(tape, add_bias(tape, matmul(tape, x, w), b))


def attention_forward(tape: Tape, x1: Node, x2: Node, x3: Node,
                      key_mask: np.ndarray) -> Node:
    """softmax(x1 x2^T / sqrt(d)) x3 with masked key rows zeroed out."""
    if x1.shape[1] != x2.shape[1]:
        raise ShapeError(f"attention: query dim {x1.shape[1]} != key dim {x2.shape[1]}")
    if x2.shape[0] != x3.shape[0]:
        raise ShapeError(f"attention: {x2.shape[0]} keys but {x3.shape[0]} values")
    d = x1.shape[1]
    logits = scale(tape, matmul(tape, x1, transpose(tape, x2)), 1.0 / math.sqrt(d))
    weights = masked_softmax(tape, logits, key_mask)
    return matmul(tape, weights, x3)


def multihead_forward(tape: Tape, x: Node, wq: Node, wk: Node, wv: Node,
                      wo: Node, n_heads: int, key_mask: np.ndarray) -> Node:
    """Multi-head self-attention over the rows of x.

    The per-head projections are stored fused: head i owns the i-th block
    of ``d_model / n_heads`` columns of each projection matrix.
    """
    d_model = wq.shape[1]
    if d_model % n_heads != 0:
        raise ConfigError(f"{n_heads} heads do not divide model width {d_model}")
    d_head = d_model // n_heads
    q = matmul(tape, x, wq)
    k = matmul(tape, x, wk)
    v = matmul(tape, x, wv)
    heads = []
    for i in range(n_heads):
        lo, hi = i * d_head, (i + 1) * d_head
        heads.append(
            attention_forward(
                tape,
                col_slice(tape, q, lo, hi),
                col_slice(tape, k, lo, hi),
                col_slice(tape, v, lo, hi),
                key_mask,
            )
        )
    return matmul(tape, concat_cols(tape, heads), wo)
