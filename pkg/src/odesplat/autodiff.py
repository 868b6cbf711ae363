"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` records every operation in creation order, so the node list is
already topologically sorted.  Graphs are built fresh for each training step
(define-by-run) and thrown away afterwards.

Example::

    g = Graph()
    x = g.leaf(np.array([1.0, 2.0, 3.0]))
    y = (x * x).sum()
    grads = g.backward(y)
    grads[x]            # array([2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(FloatingPointError):
    """Raised when a forward value or a gradient stops being finite."""

    def __init__(self, node_id: int, op: str, where: str = "forward"):
        self.node_id = node_id
        self.op = op
        self.where = where
        super().__init__(f"non-finite {where} value at node {node_id} ({op})")


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


@dataclass
class Node:
    id: int
    op: str
    value: np.ndarray
    parents: tuple[int, ...]
    fwd: Callable | None = None
    vjp: Callable | None = None
    cache: object = None
    requires_grad: bool = False
    name: str | None = None
    saves: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class GradMap:
    """Gradients keyed by node id or :class:`Var`; unreached nodes read as zeros."""

    def __init__(self, graph: "Graph", grads: dict[int, np.ndarray]):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, key: "Var | int") -> np.ndarray:
        nid = key.id if isinstance(key, Var) else int(key)
        g = self._grads.get(nid)
        if g is None:
            return np.zeros(self._graph.nodes[nid].shape, dtype=DTYPE)
        return g

    def __contains__(self, key) -> bool:
        nid = key.id if isinstance(key, Var) else int(key)
        return nid in self._grads

    def __len__(self) -> int:
        return len(self._graph.nodes)


class Graph:
    """Record of array operations, differentiable in reverse mode."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def _add(self, node: Node) -> "Var":
        if self.check_finite and not np.all(np.isfinite(node.value)):
            raise NumericError(node.id, node.op, "forward")
        self.nodes.append(node)
        return Var(self, node.id)

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> "Var":
        arr = np.array(value, dtype=DTYPE)
        return self._add(Node(len(self.nodes), "leaf", arr, (), requires_grad=requires_grad, name=name))

    def constant(self, value) -> "Var":
        return self.leaf(value, requires_grad=False)

    def lift(self, x) -> "Var":
        if isinstance(x, Var):
            if x.graph is not self:
                raise ContractError("variables belong to different graphs")
            return x
        return self.constant(x)

    def apply(
        self,
        op: str,
        fwd: Callable,
        vjp: Callable,
        parents: Sequence["Var"],
        saves: bool = False,
    ) -> "Var":
        """Append a node computed by ``fwd(*parent_values)``.

        ``vjp(grad_out, out, cache, *parent_values)`` must return one gradient
        (or None) per parent.  When ``saves`` is true, ``fwd`` returns
        ``(value, cache)`` and the cache is handed back to ``vjp``.
        """
        parents = [self.lift(p) for p in parents]
        vals = [self.nodes[p.id].value for p in parents]
        out = fwd(*vals)
        cache = None
        if saves:
            out, cache = out
        out = np.asarray(out, dtype=DTYPE)
        rg = any(self.nodes[p.id].requires_grad for p in parents)
        node = Node(len(self.nodes), op, out, tuple(p.id for p in parents), fwd, vjp, cache, rg, saves=saves)
        return self._add(node)

    def backward(self, root: "Var | int") -> GradMap:
        rid = root.id if isinstance(root, Var) else int(root)
        rnode = self.nodes[rid]
        if rnode.value.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {rnode.shape}")
        grads: dict[int, np.ndarray] = {rid: np.ones(rnode.shape, dtype=DTYPE)}
        for nid in range(rid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if self.check_finite and not np.all(np.isfinite(g)):
                raise NumericError(nid, node.op, "gradient")
            if not node.parents or not node.requires_grad:
                continue
            pvals = [self.nodes[p].value for p in node.parents]
            pgrads = node.vjp(g, node.value, node.cache, *pvals)
            for pid, pg in zip(node.parents, pgrads):
                if pg is None or not self.nodes[pid].requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                if pg.shape != self.nodes[pid].shape:
                    pg = _unbroadcast(pg, self.nodes[pid].shape)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return GradMap(self, grads)

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward computation from the leaf values."""
        vals: list[np.ndarray] = []
        for node in self.nodes:
            if node.fwd is None:
                vals.append(node.value.copy())
                continue
            out = node.fwd(*[vals[p] for p in node.parents])
            if node.saves:
                out = out[0]
            vals.append(np.asarray(out, dtype=DTYPE))
        return vals


class Var:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "id")
    __array_priority__ = 100

    def __init__(self, graph: Graph, nid: int):
        self.graph = graph
        self.id = nid

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.id]

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.node.op}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(self.graph.lift(o), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(self.graph.lift(o), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(self.graph.lift(o), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return vmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Var):
            return x.graph
    raise ContractError("operation needs at least one Var argument")


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Var:
    g = _graph_of(a, b)
    return g.apply("add", np.add, lambda gr, o, c, x, y: (gr, gr), [a, b])


def sub(a, b) -> Var:
    g = _graph_of(a, b)
    return g.apply("sub", np.subtract, lambda gr, o, c, x, y: (gr, -gr), [a, b])


def mul(a, b) -> Var:
    g = _graph_of(a, b)
    return g.apply("mul", np.multiply, lambda gr, o, c, x, y: (gr * y, gr * x), [a, b])


def div(a, b) -> Var:
    g = _graph_of(a, b)
    return g.apply("div", np.divide, lambda gr, o, c, x, y: (gr / y, -gr * o / y), [a, b])


def neg(a: Var) -> Var:
    return a.graph.apply("neg", np.negative, lambda gr, o, c, x: (-gr,), [a])


def power(a: Var, p: float) -> Var:
    p = float(p)
    return a.graph.apply(
        "pow", lambda x: x**p, lambda gr, o, c, x: (gr * p * x ** (p - 1),), [a]
    )


def square(a: Var) -> Var:
    return a.graph.apply("square", np.square, lambda gr, o, c, x: (2.0 * gr * x,), [a])


def exp(a: Var) -> Var:
    return a.graph.apply("exp", np.exp, lambda gr, o, c, x: (gr * o,), [a])


def log(a: Var) -> Var:
    return a.graph.apply("log", np.log, lambda gr, o, c, x: (gr / x,), [a])


def sin(a: Var) -> Var:
    return a.graph.apply("sin", np.sin, lambda gr, o, c, x: (gr * np.cos(x),), [a])


def cos(a: Var) -> Var:
    return a.graph.apply("cos", np.cos, lambda gr, o, c, x: (-gr * np.sin(x),), [a])


def sqrt(a: Var) -> Var:
    return a.graph.apply("sqrt", np.sqrt, lambda gr, o, c, x: (0.5 * gr / o,), [a])


def tanh(a: Var) -> Var:
    return a.graph.apply("tanh", np.tanh, lambda gr, o, c, x: (gr * (1.0 - o * o),), [a])


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a: Var) -> Var:
    return a.graph.apply("sigmoid", _sigmoid, lambda gr, o, c, x: (gr * o * (1.0 - o),), [a])


def relu(a: Var) -> Var:
    # subgradient at exactly 0 is 0
    return a.graph.apply(
        "relu", lambda x: np.maximum(x, 0.0), lambda gr, o, c, x: (gr * (x > 0),), [a]
    )


def vabs(a: Var) -> Var:
    return a.graph.apply("abs", np.abs, lambda gr, o, c, x: (gr * np.sign(x),), [a])


def clamp(a: Var, lo: float | None = None, hi: float | None = None) -> Var:
    """Clip to ``[lo, hi]``; gradient flows only where the input is strictly inside."""

    def vjp(gr, o, c, x):
        m = np.ones_like(x, dtype=bool)
        if lo is not None:
            m &= x > lo
        if hi is not None:
            m &= x < hi
        return (gr * m,)

    return a.graph.apply("clamp", lambda x: np.clip(x, lo, hi), vjp, [a])


def where(mask, a, b) -> Var:
    g = _graph_of(a, b)
    mask = np.asarray(mask, dtype=bool)
    return g.apply(
        "where",
        lambda x, y: np.where(mask, x, y),
        lambda gr, o, c, x, y: (np.where(mask, gr, 0.0), np.where(mask, 0.0, gr)),
        [a, b],
    )


def softmax(a: Var, axis: int = -1) -> Var:
    def fwd(x):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    def vjp(gr, o, c, x):
        return (o * (gr - (gr * o).sum(axis=axis, keepdims=True)),)

    return a.graph.apply("softmax", fwd, vjp, [a])


def normalize(a: Var, axis: int = -1, eps: float = 0.0) -> Var:
    """Scale to unit Euclidean length along ``axis``."""

    def fwd(x):
        n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        return x / (n + eps), n

    def vjp(gr, o, n, x):
        d = n + eps
        return ((gr - o * (gr * o).sum(axis=axis, keepdims=True) * (n / d)) / d,)

    return a.graph.apply("normalize", fwd, vjp, [a], saves=True)


# ----------------------------------------------------------------------------
# reductions and shape ops


def _expand(gr, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        gr = np.expand_dims(gr, axes)
    return np.broadcast_to(gr, shape)


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    return a.graph.apply(
        "sum",
        lambda x: x.sum(axis=axis, keepdims=keepdims),
        lambda gr, o, c, x: (_expand(gr, x.shape, axis, keepdims),),
        [a],
    )


def vmean(a: Var, axis=None, keepdims=False) -> Var:
    def vjp(gr, o, c, x):
        n = x.size // max(o.size, 1)
        return (_expand(gr, x.shape, axis, keepdims) / n,)

    return a.graph.apply("mean", lambda x: x.mean(axis=axis, keepdims=keepdims), vjp, [a])


def vmax(a: Var, axis=None, keepdims=False) -> Var:
    """Max reduction; the gradient goes to the first maximal entry."""

    def fwd(x):
        if axis is None:
            idx = np.argmax(x)
            return x.reshape(-1)[idx].reshape((1,) * x.ndim if keepdims else ()), idx
        idx = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(idx, axis), axis)
        return (out if keepdims else np.squeeze(out, axis)), idx

    def vjp(gr, o, idx, x):
        out = np.zeros_like(x)
        if axis is None:
            out.reshape(-1)[idx] = np.asarray(gr).reshape(-1)[0]
            return (out,)
        g = gr if keepdims else np.expand_dims(gr, axis)
        np.put_along_axis(out, np.expand_dims(idx, axis), g, axis)
        return (out,)

    return a.graph.apply("max", fwd, vjp, [a], saves=True)


def reshape(a: Var, shape) -> Var:
    return a.graph.apply(
        "reshape", lambda x: x.reshape(shape), lambda gr, o, c, x: (gr.reshape(x.shape),), [a]
    )


def transpose(a: Var, axes=None) -> Var:
    inv = None if axes is None else tuple(np.argsort(axes))
    return a.graph.apply(
        "transpose",
        lambda x: np.transpose(x, axes),
        lambda gr, o, c, x: (np.transpose(gr, inv),),
        [a],
    )


def swapaxes(a: Var, i: int, j: int) -> Var:
    return a.graph.apply(
        "swapaxes",
        lambda x: np.swapaxes(x, i, j),
        lambda gr, o, c, x: (np.swapaxes(gr, i, j),),
        [a],
    )


def broadcast_to(a: Var, shape) -> Var:
    shape = tuple(shape)
    return a.graph.apply(
        "broadcast",
        lambda x: np.broadcast_to(x, shape).copy(),
        lambda gr, o, c, x: (_unbroadcast(gr, x.shape),),
        [a],
    )


def getitem(a: Var, idx) -> Var:
    def vjp(gr, o, c, x):
        out = np.zeros_like(x)
        np.add.at(out, idx, gr)
        return (out,)

    return a.graph.apply("getitem", lambda x: x[idx], vjp, [a])


def take(a: Var, indices, axis: int = 0) -> Var:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.intp)

    def vjp(gr, o, c, x):
        out = np.zeros_like(x)
        if axis == 0:
            flat = gr.reshape((-1,) + x.shape[1:])
            np.add.at(out, indices.reshape(-1), flat)
        else:
            xm = np.moveaxis(out, axis, 0)
            gm = np.moveaxis(gr, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
            np.add.at(xm, indices.reshape(-1), gm.reshape((-1,) + xm.shape[1:]))
        return (out,)

    return a.graph.apply("take", lambda x: np.take(x, indices, axis=axis), vjp, [a])


def concat(xs: Sequence, axis: int = 0) -> Var:
    g = _graph_of(*xs)

    def fwd(*vals):
        return np.concatenate(vals, axis=axis)

    def vjp(gr, o, c, *vals):
        sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return tuple(np.split(gr, sizes, axis=axis))

    return g.apply("concat", fwd, vjp, list(xs))


def stack(xs: Sequence, axis: int = 0) -> Var:
    g = _graph_of(*xs)

    def vjp(gr, o, c, *vals):
        return tuple(np.moveaxis(gr, axis, 0))

    return g.apply("stack", lambda *v: np.stack(v, axis=axis), vjp, list(xs))


def matmul(a, b) -> Var:
    """Matrix product with numpy broadcasting over leading axes (operands ≥ 2-D)."""
    g = _graph_of(a, b)

    def vjp(gr, o, c, x, y):
        return gr @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ gr

    va, vb = g.lift(a).value, g.lift(b).value
    if va.ndim < 2 or vb.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")
    return g.apply("matmul", np.matmul, vjp, [a, b])


# ----------------------------------------------------------------------------
# gradient checking


def check_gradient(
    f: Callable[[Var], Var],
    x,
    eps: float = 1e-6,
    coords: Sequence[int] | None = None,
) -> float:
    """Largest relative disagreement between reverse-mode and central differences.

    ``f`` maps a leaf :class:`Var` to a scalar :class:`Var`; it is re-run on a
    fresh graph for every perturbation.  ``coords`` restricts the check to a
    subset of flat coordinates.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x, dtype=DTYPE)

    def value_at(arr):
        g = Graph()
        y = f(g.leaf(arr))
        v = float(np.asarray(y.value).reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericError(y.id, y.node.op, "forward")
        return v

    g = Graph()
    xv = g.leaf(x)
    y = f(xv)
    analytic = g.backward(y)[xv].reshape(-1)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        num = (value_at(xp.reshape(x.shape)) - value_at(xm.reshape(x.shape))) / (2 * eps)
        err = abs(analytic[i] - num) / max(1.0, abs(num))
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place on ``params`` and the state moments.

    Parameters with no entry in ``grads`` are treated as having zero gradient.
    ``lr`` overrides ``state.lr`` for this step only (learning-rate schedules).
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ContractError(
                f"shape mismatch for {name!r}: param {params[name].shape}, grad {np.shape(g)}"
            )
    state.step_count += 1
    t = state.step_count
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ContractError(f"moment shape mismatch for {name!r}")
        v = state.second_moment[name]
        g = grads.get(name)
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
