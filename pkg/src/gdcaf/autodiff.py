"""Tape-style reverse-mode differentiation over the kernels in :mod:`gdcaf.tensor`.

Every differentiable op builds a :class:`Node` that remembers its parents and a
closure computing the vector-Jacobian product. :func:`backward` orders the
recorded graph topologically and replays it in reverse, accumulating into
:class:`Parameter` gradient buffers (additively, so minibatch gradients sum
until :meth:`Parameter.zero_grad`).

The relu subgradient at 0 is 0; for leaky relu it is 1 (the ``x >= 0`` branch).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T


class Node:
    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_vjp")

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "leaf", vjp=None):
        self.value = np.asarray(value)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = any(p.requires_grad for p in self.parents)
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_node(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Node):
    """Trainable leaf with a persistent gradient accumulator."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(np.ascontiguousarray(value))
        self.requires_grad = True
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def variable(x) -> Node:
    """Non-parameter leaf whose gradient is kept in ``.grad`` after backward."""
    n = Node(x)
    n.requires_grad = True
    return n


# ---------------------------------------------------------------------------
# kink monitor used by finite-difference checks

_kink_logs: list[list[np.ndarray]] = []


@contextlib.contextmanager
def record_kinks() -> Iterator[list[np.ndarray]]:
    """Collect the sign pattern of every relu / leaky-relu input."""
    log: list[np.ndarray] = []
    _kink_logs.append(log)
    try:
        yield log
    finally:
        _kink_logs.remove(log)


def _log_kink(x: np.ndarray) -> None:
    for log in _kink_logs:
        log.append(x >= 0)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value * b.value,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Node, c: float) -> Node:
    c = a.value.dtype.type(c)
    return Node(a.value * c, (a,), "scale", lambda g: (g * c,))


def sum_all(a: Node) -> Node:
    return Node(
        np.asarray(a.value.sum(dtype=np.float64), dtype=a.value.dtype).reshape(1),
        (a,),
        "sum",
        lambda g: (np.broadcast_to(g.reshape(()), a.shape).astype(a.value.dtype),),
    )


def reshape(a: Node, shape: Sequence[int]) -> Node:
    return Node(a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Node(
        np.ascontiguousarray(a.value.transpose(axes)),
        (a,),
        "transpose",
        lambda g: (g.transpose(inv),),
    )


def concat(nodes: Sequence[Node], axis: int) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return Node(
        np.concatenate([n.value for n in nodes], axis=axis),
        nodes,
        "concat",
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def relu(x: Node) -> Node:
    _log_kink(x.value)
    mask = x.value > 0
    return Node(T.relu(x.value), (x,), "relu", lambda g: (g * mask,))


def leaky_relu(x: Node, slope: float) -> Node:
    _log_kink(x.value)
    d = T.leaky_relu_grad(x.value, slope)
    return Node(T.leaky_relu(x.value, slope), (x,), "leaky_relu", lambda g: (g * d,))


def softmax(x: Node, axis: int = -1) -> Node:
    s = T.softmax(x.value, axis)
    return Node(s, (x,), "softmax", lambda g: (T.softmax_backward(g, s, axis),))


def matmul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(T.matmul(a.value, b.value), (a, b), "matmul", vjp)


def pairwise_inner(a: Node, b: Node, d: int) -> Node:
    """Scaled inner products between rows: ``a @ b^T / sqrt(d)``.

    ``a`` is ``(..., n, F)`` and ``b`` is ``(..., m, F)`` of flattened maps.
    """
    bt = transpose(b, tuple(range(b.value.ndim - 2)) + (b.value.ndim - 1, b.value.ndim - 2))
    return scale(matmul(a, bt), 1.0 / math.sqrt(d))


def conv2d_depthwise(x: Node, kernels: Node) -> Node:
    return Node(
        T.conv2d_depthwise(x.value, kernels.value),
        (x, kernels),
        "depthwise",
        lambda g: T.conv2d_depthwise_backward(g, x.value, kernels.value),
    )


def conv2d_pointwise(x: Node, weights: Node, bias: Node) -> Node:
    return Node(
        T.conv2d_pointwise(x.value, weights.value, bias.value),
        (x, weights, bias),
        "pointwise",
        lambda g: T.conv2d_pointwise_backward(g, x.value, weights.value, bias.value),
    )


def group_norm(x: Node, groups: int, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    y, (xhat, inv_std) = T.group_norm_with_stats(x.value, groups, gamma.value, beta.value, eps)
    return Node(
        y,
        (x, gamma, beta),
        "group_norm",
        lambda g: T.group_norm_backward(g, xhat, inv_std, groups, gamma.value),
    )


def avg_pool2(x: Node) -> Node:
    return Node(T.avg_pool2(x.value), (x,), "avg_pool2", lambda g: (T.avg_pool2_backward(g),))


def upsample2(x: Node) -> Node:
    return Node(T.upsample2(x.value), (x,), "upsample2", lambda g: (T.upsample2_backward(g),))


def mse(pred: Node, target) -> Node:
    target = np.asarray(target.value if isinstance(target, Node) else target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.value - target
    n = diff.size
    val = np.asarray([np.mean(np.square(diff, dtype=np.float64))], dtype=pred.value.dtype)
    return Node(val, (pred,), "mse", lambda g: (g.reshape(()) * (2.0 / n) * diff,))


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(p) into every reachable parameter's ``grad``.

    Returns a ``{name: gradient}`` map for the reachable parameters.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    reached: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g.astype(node.value.dtype, copy=False)
            reached[node.name] = node.grad
            continue
        if node._vjp is None:
            node.grad = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return reached


def finite_diff_check(
    f: Callable[[], Node],
    params: Iterable[Parameter],
    eps: float = 1e-3,
    floor: float = 1e-7,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    tensor_floor: float = 1e-3,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` evaluates the scalar objective from the current parameter values.
    Elements whose two perturbed evaluations land on different sides of a
    relu / leaky-relu kink are skipped. Relative error is
    ``|a - n| / max(|a|, |n|, floor, tensor_floor * max|a_tensor|)``, so entries
    far below their tensor's largest gradient are judged on the tensor's scale
    (central-difference truncation swamps them otherwise). Both zero gives 0.
    """
    return gradient_report(f, params, eps, floor, max_elements, rng, tensor_floor)["max_rel_error"]


def gradient_report(f, params, eps=1e-3, floor=1e-7, max_elements=None, rng=None, tensor_floor=1e-3) -> dict:
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}
    scale = {id(p): tensor_floor * float(np.abs(p.grad).max(initial=0.0)) for p in params}

    candidates = [(p, i) for p in params for i in range(p.value.size)]
    if max_elements is not None and len(candidates) > max_elements:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(candidates), size=max_elements, replace=False)
        candidates = [candidates[k] for k in sorted(pick)]

    worst = 0.0
    worst_at = None
    worst_raw = 0.0
    skipped = 0
    for p, i in candidates:
        flat = p.value.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        with record_kinks() as plus_signs:
            fp = float(f().value.reshape(()))
        flat[i] = orig - eps
        with record_kinks() as minus_signs:
            fm = float(f().value.reshape(()))
        flat[i] = orig
        if any(not np.array_equal(a, b) for a, b in zip(plus_signs, minus_signs)):
            skipped += 1
            continue
        num = (fp - fm) / (2 * eps)
        ana = float(analytic[id(p)].reshape(-1)[i])
        err = 0.0 if num == ana else abs(num - ana) / max(abs(num), abs(ana), floor, scale[id(p)])
        raw = 0.0 if num == ana else abs(num - ana) / max(abs(num), abs(ana), floor)
        worst_raw = max(worst_raw, raw)
        if err > worst:
            worst, worst_at = err, (p.name, i, ana, num)
    return {
        "max_rel_error": worst,
        "max_elementwise_error": worst_raw,
        "worst": worst_at,
        "checked": len(candidates) - skipped,
        "skipped_kinks": skipped,
    }
