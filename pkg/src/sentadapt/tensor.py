"""Float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor`. When grad mode is
on and at least one input requires a gradient, the output carries a
:class:`Node` linking it to its inputs; :func:`backward` walks those links in
reverse topological order.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
the smaller shape must be a suffix of the larger one (``(D,)`` against
``(B, L, D)``). Anything else needs an explicit :func:`reshape`.
"""

from __future__ import annotations

import builtins
import itertools
import math
import threading
from collections.abc import Callable, Sequence
from contextlib import contextmanager

import numpy as np

__all__ = [
    "BackwardError",
    "Graph",
    "Node",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "concat_lastdim",
    "current_scope",
    "div",
    "dot",
    "embedding",
    "exp",
    "finite_difference_check",
    "forward_op",
    "gelu",
    "is_grad_enabled",
    "l2_norm",
    "layernorm_lastdim",
    "log",
    "matmul",
    "max_with_zero",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "scope",
    "slice",
    "softmax_lastdim",
    "strict",
    "sub",
    "sum",
    "tanh",
    "transpose",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


_local = threading.local()
_ids = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _strict_enabled() -> bool:
    return getattr(_local, "strict", False)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def strict(enabled: bool = True):
    """Reject non-finite operands in every op executed inside the block."""
    prev = _strict_enabled()
    _local.strict = enabled
    try:
        yield
    finally:
        _local.strict = prev


@contextmanager
def scope(label: str):
    """Tag recorded nodes with a hierarchical label (used for tape inspection)."""
    stack = getattr(_local, "scopes", None)
    if stack is None:
        stack = _local.scopes = []
    stack.append(label)
    try:
        yield
    finally:
        stack.pop()


def current_scope() -> str:
    return "/".join(getattr(_local, "scopes", ()))


class Node:
    """One recorded operation: its kind, its inputs and the id of its output."""

    __slots__ = ("kind", "inputs", "output_id", "scope", "backward_fn", "released")

    def __init__(self, kind, inputs, output_id, scope_label, backward_fn):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output_id = output_id
        self.scope = scope_label
        self.backward_fn = backward_fn
        self.released = False

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    def __repr__(self):
        return f"Node({self.kind!r}, inputs={self.input_ids}, output={self.output_id}, scope={self.scope!r})"


class Tensor:
    """Dense float64 array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "id", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.id = next(_ids)
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.id = next(_ids)
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node(self) -> Node | None:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_inputs(kind: str, inputs: Sequence[Tensor]) -> None:
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind}: expected Tensor inputs, got {type(t).__name__}")
    if _strict_enabled():
        for t in inputs:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"{kind}: non-finite input of shape {t.shape}")


def _emit(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn: Callable) -> Tensor:
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(data, dtype=np.float64), track)
    if track:
        out._node = Node(kind, inputs, out.id, current_scope(), backward_fn)
    return out


def _broadcast_shape(kind: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(
        f"{kind}: incompatible shapes {a} and {b} (only trailing-dimension broadcast is supported)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("add", (a, b))
    _broadcast_shape("add", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("sub", (a, b))
    _broadcast_shape("sub", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("mul", (a, b))
    _broadcast_shape("mul", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("div", (a, b))
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit("div", (a, b), out, bw)


def scale(x: Tensor, factor: float) -> Tensor:
    _check_inputs("scale", (x,))
    factor = float(factor)
    return _emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def neg(x: Tensor) -> Tensor:
    _check_inputs("neg", (x,))
    return _emit("neg", (x,), -x.data, lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or equal-batch ``(..., m, k) @ (..., k, n)``."""
    _check_inputs("matmul", (a, b))
    sa, sb = a.shape, b.shape
    ok = a.ndim >= 2 and b.ndim >= 2 and sa[-1] == sb[-2]
    shared_weight = ok and b.ndim == 2
    if ok and not shared_weight:
        ok = a.ndim == b.ndim and sa[:-2] == sb[:-2]
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared_weight:
            gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    _check_inputs("reshape", (x,))
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    _check_inputs("transpose", (x,))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    _check_inputs("concat_lastdim", tensors)
    if not tensors:
        raise ShapeError("concat_lastdim: no inputs")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_lastdim: incompatible shapes {tensors[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit("concat_lastdim", tensors, np.concatenate([t.data for t in tensors], axis=-1), bw)


def slice(x: Tensor, index) -> Tensor:  # noqa: A001 - op name
    """Basic (non-fancy) numpy indexing."""
    _check_inputs("slice", (x,))
    items = index if isinstance(index, tuple) else (index,)
    for item in items:
        if not (item is None or isinstance(item, (int, np.integer, builtins.slice, type(Ellipsis)))):
            raise ShapeError(f"slice: unsupported index {item!r} for shape {x.shape}")
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {x.shape}") from None

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), np.array(out, dtype=np.float64), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of a ``(V, D)`` table by an integer id array."""
    _check_inputs("embedding", (weight,))
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {weight.shape}")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _emit("embedding", (weight,), weight.data[ids], bw)


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    _check_inputs("relu", (x,))
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def max_with_zero(x: Tensor) -> Tensor:
    """``max(x, 0)``; the subgradient at the kink is 0."""
    _check_inputs("max_with_zero", (x,))
    mask = x.data > 0
    return _emit("max_with_zero", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    _check_inputs("gelu", (x,))
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _emit("gelu", (x,), out, bw)


def tanh(x: Tensor) -> Tensor:
    _check_inputs("tanh", (x,))
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    _check_inputs("exp", (x,))
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    _check_inputs("log", (x,))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit("log", (x,), out, lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# normalizations and reductions
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    _check_inputs("softmax_lastdim", (x,))
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_lastdim", (x,), p, bw)


def layernorm_lastdim(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                      eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply the optional affine ``gamma * x + beta``."""
    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    _check_inputs("layernorm_lastdim", inputs)
    d = x.shape[-1]
    for t in (gamma, beta):
        if t is not None and t.shape != (d,):
            raise ShapeError(f"layernorm_lastdim: affine shape {t.shape} does not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def bw(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, (d,)))
        if beta is not None:
            grads.append(_unbroadcast(g, (d,)))
        return tuple(grads)

    return _emit("layernorm_lastdim", inputs, out, bw)


def _norm_axis(kind: str, x: Tensor, axis: int | None) -> int | None:
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{kind}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - op name
    _check_inputs("sum", (x,))
    ax = _norm_axis("sum", x, axis)

    def bw(g):
        if ax is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(axis=ax)), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    _check_inputs("mean", (x,))
    ax = _norm_axis("mean", x, axis)
    count = x.data.size if ax is None else x.shape[ax]

    def bw(g):
        if ax is None:
            return (np.full(x.shape, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, ax) / count, x.shape).copy(),)

    return _emit("mean", (x,), np.asarray(x.data.mean(axis=ax)), bw)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at a zero vector is zero."""
    _check_inputs("l2_norm", (x,))
    ax = _norm_axis("l2_norm", x, axis)
    n = np.sqrt((x.data**2).sum(axis=ax))

    def bw(g):
        n_k = np.expand_dims(n, ax)
        safe = np.where(n_k > 0, n_k, 1.0)
        return (np.where(n_k > 0, x.data / safe, 0.0) * np.expand_dims(g, ax),)

    return _emit("l2_norm", (x,), np.asarray(n), bw)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis of two equal-shape tensors."""
    _check_inputs("dot", (a, b))
    if a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        gk = np.expand_dims(g, -1)
        return gk * b.data, gk * a.data

    return _emit("dot", (a, b), np.asarray((a.data * b.data).sum(axis=-1)), bw)


_FORWARD_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "neg": neg,
    "concat_lastdim": lambda *ts: concat_lastdim(ts),
    "slice": slice,
    "reshape": reshape,
    "transpose": transpose,
    "embedding": embedding,
    "relu": relu,
    "gelu": gelu,
    "tanh": tanh,
    "softmax_lastdim": softmax_lastdim,
    "layernorm_lastdim": layernorm_lastdim,
    "sum": sum,
    "mean": mean,
    "max_with_zero": max_with_zero,
    "l2_norm": l2_norm,
    "dot": dot,
    "exp": exp,
    "log": log,
}


def forward_op(kind: str, inputs: Sequence[Tensor], *args, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, *args, **kwargs)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


class Graph:
    """Recorded nodes reachable from one output, inputs always before consumers."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        order: list[Node] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if t.id in seen:
                continue
            seen.add(t.id)
            stack.append((t, True))
            for inp in reversed(node.inputs):
                if inp._node is not None and inp.id not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]

    def scopes(self) -> list[str]:
        return [n.scope for n in self.nodes]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf."""
    if loss.data.size != 1:
        raise BackwardError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("backward: loss does not depend on any tensor that requires grad")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    graph = Graph.from_output(loss)
    if any(node.released for node in graph.nodes):
        raise BackwardError("backward: graph already consumed; run the forward pass again")

    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(node.output_id, None)
        fn, node.backward_fn, node.released = node.backward_fn, None, True
        if g is None:
            continue
        for t, gi in zip(node.inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad = t.grad + gi
            elif t.id in pending:
                pending[t.id] = pending[t.id] + gi
            else:
                pending[t.id] = gi


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences.

    The per-component error is ``|ga - gn| / max(floor, |ga| + |gn|)``. The
    floor is the smallest gradient a central difference can resolve, roughly
    ``1e4 * eps_machine * max(1, |f(x)|) / epsilon`` (never below 1e-8), so
    components that are zero up to rounding do not count as relative errors.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    probe = Tensor(x.data, requires_grad=True)
    out = f(probe)
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NonFiniteError("finite_difference_check: f(x) must be a finite scalar")
    if out.requires_grad:
        backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    base = x.data.copy()
    with no_grad():
        for idx in np.ndindex(*base.shape):
            orig = base[idx]
            base[idx] = orig + epsilon
            hi = f(Tensor(base)).item()
            base[idx] = orig - epsilon
            lo = f(Tensor(base)).item()
            base[idx] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NonFiniteError(f"finite_difference_check: non-finite f near index {idx}")
            numeric[idx] = (hi - lo) / (2 * epsilon)

    floor = max(1e-8, 1e4 * np.finfo(np.float64).eps * max(1.0, abs(out.item())) / epsilon)
    rel = np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
