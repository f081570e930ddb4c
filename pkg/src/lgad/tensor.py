"""Dense tensors with a define-by-run reverse-mode gradient tape.

Tensors wrap a numpy array. While a :class:`Tape` is active, every primitive
op whose inputs are tracked (a watched parameter or the output of an earlier
recorded op) appends a record to the tape. ``Tape.backward`` walks the
records in reverse and returns a :class:`Gradients` map keyed by node id.

Broadcasting is deliberately absent except tensor-by-scalar; row-wise
broadcasting over a batch has its own explicit ops (``add_row``,
``mul_row``).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None and isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f":
        return np.asarray(data)  # 0-d results arrive as numpy scalars
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return arr


class Tensor:
    """An n-dimensional value, optionally recorded on a gradient tape."""

    __slots__ = ("data", "requires_grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: int
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Gradients(dict):
    """Node id -> gradient array. Also indexable by a Tensor on the same tape.

    Nodes the loss does not reach map to zeros of the node's shape.
    """

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        super().__init__(grads)
        self._tape = tape

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            node = self._tape.node_of(key)
            if node is None:
                raise TapeError("tensor is not recorded on this tape")
            key = node
        if dict.__contains__(self, key):
            return dict.__getitem__(self, key)
        shape, dtype = self._tape._meta[key]
        return np.zeros(shape, dtype=dtype)


class Tape:
    """Single-threaded record of primitive ops, rebuilt for every step.

    Use as a context manager; parameters are tracked through ``watch``.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._meta: list[tuple[tuple[int, ...], np.dtype]] = []
        self._leaves: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []

    def __enter__(self) -> Tape:
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()

    def _new_node(self, arr: np.ndarray) -> int:
        self._meta.append((arr.shape, arr.dtype))
        return len(self._meta) - 1

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf and return its node id."""
        if t.tape is self and t.node is not None:
            return t.node
        key = id(t)
        if key not in self._leaves:
            self._leaves[key] = self._new_node(t.data)
            # keep the tensor alive so id() stays unique for the tape's lifetime
            self._leaf_refs.append(t)
        return self._leaves[key]

    def node_of(self, t: Tensor) -> int | None:
        if t.tape is self:
            return t.node
        return self._leaves.get(id(t))

    def _track(self, t: Tensor) -> int | None:
        if t.tape is self and t.node is not None:
            return t.node
        if id(t) in self._leaves:
            return self._leaves[id(t)]
        if t.requires_grad:
            return self.watch(t)
        return None

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> Gradients:
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(rec.out)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for node, gi in zip(rec.inputs, in_grads):
                if node is None or gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi
        out = Gradients(self, grads)
        for p in params or ():
            node = self.watch(p)
            if node not in out:
                dict.__setitem__(out, node, np.zeros_like(p.data))
        return out


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` and, if any input is tracked, record ``backward``.

    ``backward(g_out)`` must return one gradient (or None) per input. This
    is the extension point for ops defined outside this module.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    nodes = tuple(tape._track(t) for t in inputs)
    if all(n is None for n in nodes):
        return out
    out.node = tape._new_node(out.data)
    out.tape = tape
    tape.records.append(_Record(out.node, nodes, backward))
    return out


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> Gradients:
    if loss.tape is None:
        raise TapeError("loss is not on a tape")
    return loss.tape.backward(loss, params)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record(t, (x,), lambda g: (g * (1 - t * t),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return record(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return record(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g / n, shape).copy(),))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x[B, n] + row[n], broadcast over the batch (bias add)."""
    if x.data.ndim != 2 or row.shape != (x.shape[1],):
        raise ShapeError(f"add_row: {x.shape} and {row.shape}")
    return record(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=0)))


def mul_row(x: Tensor, row: Tensor) -> Tensor:
    """x[B, n] * row[n], broadcast over the batch (mask application)."""
    if x.data.ndim != 2 or row.shape != (x.shape[1],):
        raise ShapeError(f"mul_row: {x.shape} and {row.shape}")
    X, R = x.data, row.data
    return record(X * R, (x, row), lambda g: (g * R, (g * X).sum(axis=0)))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if any(p.data.ndim != 2 for p in parts) or len({p.shape[0] for p in parts}) != 1:
        raise ShapeError(f"concat_cols: {[p.shape for p in parts]}")
    widths = np.cumsum([p.shape[1] for p in parts])[:-1]
    return record(np.concatenate([p.data for p in parts], axis=1), tuple(parts),
                  lambda g: tuple(np.split(g, widths, axis=1)))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; contributes no gradient to x's producers."""
    return Tensor(x.data)


_MAP_KINDS = {
    "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "sum": sum, "mean": mean,
    "add": add, "sub": sub, "mul-elementwise": mul, "scalar-mul": scale,
}


def tensor_map(kind: str, *args):
    """Dispatch an elementwise or reduction op by name."""
    try:
        fn = _MAP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*args)


# ------------------------------------------------------ finite differences


@dataclass
class GradCheck:
    max_rel_error: float
    max_abs_error: float
    allclose: bool
    autodiff: list[np.ndarray]
    numeric: list[np.ndarray]


def finite_difference_check(f: Callable[[Sequence[Tensor]], Tensor],
                            params: Sequence[Tensor], step: float = 1e-5,
                            rtol: float = 1e-3, atol: float = 1e-6) -> GradCheck:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    ``params`` are perturbed in place (and restored). Run in float64.
    """
    with Tape() as tape:
        for p in params:
            tape.watch(p)
        loss = f(params)
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("f returned a non-finite value")
        if loss.tape is tape:
            grads = tape.backward(loss, params)
            auto = [np.asarray(grads[p], dtype=np.float64) for p in params]
        else:
            auto = [np.zeros(p.shape) for p in params]

    numeric = []
    for p in params:
        num = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(params).item()
            flat[i] = orig - step
            fm = f(params).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("f returned a non-finite value")
            num.reshape(-1)[i] = (fp - fm) / (2 * step)
        numeric.append(num)

    rel = max((float(np.max(np.abs(a - n) / (np.abs(n) + 1e-8))) for a, n in zip(auto, numeric)
               if a.size), default=0.0)
    abs_err = max((float(np.max(np.abs(a - n))) for a, n in zip(auto, numeric) if a.size),
                  default=0.0)
    close = all(np.allclose(a, n, rtol=rtol, atol=atol) for a, n in zip(auto, numeric))
    return GradCheck(rel, abs_err, close, auto, numeric)
