"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation produces a :class:`Var` node that remembers its parents and a
vector-Jacobian product (VJP) closure. VJPs are themselves written with
``Var`` operations, so a backward pass can be recorded onto the graph and
differentiated again (``grad(..., record=True)``). That is what makes the
meta-gradient through an inner gradient step possible.

Example::

    x = leaf(2.0, name="x")
    y = leaf(3.0, name="y")
    f = x * y
    gx, gy = grad(f, [x, y])      # (3.0, 2.0)
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "GradientError",
    "Var",
    "leaf",
    "const",
    "no_record",
    "is_recording",
    "grl",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "norm",
    "logsumexp",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "getitem",
    "concat",
    "clip_min",
    "topological_order",
    "forward_eval",
    "grad",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
]


class AutodiffError(Exception):
    """Base class for graph construction and differentiation failures."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, a: "Var", b: "Var", detail: str = ""):
        self.op = op
        self.nodes = (a, b)
        msg = (
            f"{op}: incompatible shapes {a.describe()} {a.shape} and "
            f"{b.describe()} {b.shape}"
        )
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError):
    pass


class GradientError(AutodiffError):
    pass


_ids = itertools.count()
_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_record():
    """Evaluate operations without building graph edges."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextmanager
def _recording(flag: bool):
    prev = is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


VJP = Callable[["Var"], Sequence["Var | None"]]
NpVJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Var:
    """One node of the computation graph.

    ``id`` is drawn from a global increasing counter, so parents always carry
    smaller ids than their children.
    """

    __slots__ = ("id", "op", "parents", "value", "grad", "requires_grad", "name", "_vjp", "_np_vjp")
    __array_priority__ = 100

    def __init__(
        self,
        value: np.ndarray,
        op: str = "leaf",
        parents: tuple["Var", ...] = (),
        vjp: VJP | None = None,
        requires_grad: bool = False,
        name: str | None = None,
        np_vjp: NpVJP | None = None,
    ):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._vjp = vjp
        self._np_vjp = np_vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def parent_ids(self) -> tuple[int, ...]:
        return tuple(p.id for p in self.parents)

    def describe(self) -> str:
        label = f"'{self.name}'" if self.name else self.op
        return f"node #{self.id} ({label})"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Var":
        return Var(self.value)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def leaf(value, name: str | None = None, requires_grad: bool = True) -> Var:
    """A graph input. Parameters are leaves with ``requires_grad=True``."""
    return Var(np.array(value, dtype=np.float64), name=name, requires_grad=requires_grad)


def const(value) -> Var:
    if isinstance(value, Var):
        return value
    return Var(_as_array(value))


def _check_finite(op: str, value: np.ndarray, parents: tuple[Var, ...]) -> None:
    if not np.isfinite(value).all():
        srcs = ", ".join(p.describe() for p in parents)
        raise NonFiniteError(f"{op} produced a non-finite value from {srcs}")


def _node(op: str, value: np.ndarray, parents: tuple[Var, ...], vjp: VJP, np_vjp: NpVJP) -> Var:
    """Create an op node. ``vjp`` maps a Var cotangent to Var parent
    cotangents (recordable); ``np_vjp`` does the same on plain arrays."""
    _check_finite(op, value, parents)
    if is_recording():
        for p in parents:
            if p.requires_grad:
                return Var(value, op, parents, vjp, True, None, np_vjp)
    return Var(value, op)


def _broadcast_shape(op: str, a: Var, b: Var) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a, b) from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and g.shape[lead + i] != 1
    )
    return np.sum(g, axis=axes).reshape(shape)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Var:
    a, b = const(a), const(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(
        "add", a.value + b.value, (a, b),
        lambda g: (sum_to(g, sa), sum_to(g, sb)),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(
        "sub", a.value - b.value, (a, b),
        lambda g: (sum_to(g, sa), sum_to(neg(g), sb)),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape
    av, bv = a.value, b.value

    def vjp(g):
        return (
            sum_to(g * b, sa) if a.requires_grad else None,
            sum_to(g * a, sb) if b.requires_grad else None,
        )

    def np_vjp(g):
        return (
            _unbroadcast(g * bv, sa) if a.requires_grad else None,
            _unbroadcast(g * av, sb) if b.requires_grad else None,
        )

    return _node("mul", av * bv, (a, b), vjp, np_vjp)


def div(a, b) -> Var:
    a, b = const(a), const(b)
    _broadcast_shape("div", a, b)
    sa, sb = a.shape, b.shape
    av, bv = a.value, b.value

    def vjp(g):
        ga = g / b
        return sum_to(ga, sa), (sum_to(neg(ga * a / b), sb) if b.requires_grad else None)

    def np_vjp(g):
        ga = g / bv
        return _unbroadcast(ga, sa), (_unbroadcast(-ga * av / bv, sb) if b.requires_grad else None)

    with np.errstate(divide="ignore", invalid="ignore"):  # _node raises NonFiniteError instead
        out = av / bv
    return _node("div", out, (a, b), vjp, np_vjp)


def neg(a) -> Var:
    a = const(a)
    return _node("neg", -a.value, (a,), lambda g: (neg(g),), lambda g: (-g,))


def grl(a) -> Var:
    """Gradient reversal: identity forward, negated gradient backward."""
    a = const(a)
    return _node("grl", a.value.copy(), (a,), lambda g: (neg(g),), lambda g: (-g,))


def power(a, k: float) -> Var:
    a = const(a)
    k = float(k)
    av = a.value
    return _node(
        "pow", av**k, (a,),
        lambda g: (g * k * power(a, k - 1.0),),
        lambda g: (g * k * av ** (k - 1.0),),
    )


def exp(a) -> Var:
    a = const(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    out: Var
    out = _node("exp", value, (a,), lambda g: (g * out,), lambda g: (g * value,))
    return out


def log(a) -> Var:
    a = const(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(av)
    return _node("log", value, (a,), lambda g: (g / a,), lambda g: (g / av,))


def sqrt(a) -> Var:
    a = const(a)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.value)
    out: Var
    out = _node("sqrt", value, (a,), lambda g: (g * 0.5 / out,), lambda g: (g * 0.5 / value,))
    return out


def tanh(a) -> Var:
    a = const(a)
    value = np.tanh(a.value)
    out: Var
    out = _node(
        "tanh", value, (a,),
        lambda g: (g * (1.0 - out * out),),
        lambda g: (g * (1.0 - value * value),),
    )
    return out


def sigmoid(a) -> Var:
    a = const(a)
    # tanh form cannot overflow
    value = 0.5 + 0.5 * np.tanh(0.5 * a.value)
    out: Var
    out = _node(
        "sigmoid", value, (a,),
        lambda g: (g * out * (1.0 - out),),
        lambda g: (g * value * (1.0 - value),),
    )
    return out


def relu(a) -> Var:
    a = const(a)
    mask = (a.value > 0).astype(np.float64)
    return _node("relu", a.value * mask, (a,), lambda g: (g * mask,), lambda g: (g * mask,))


def clip_min(a, lo: float) -> Var:
    a = const(a)
    mask = (a.value > lo).astype(np.float64)
    return _node(
        "clip_min", np.maximum(a.value, lo), (a,), lambda g: (g * mask,), lambda g: (g * mask,)
    )


# -- reductions and shape ops ----------------------------------------------


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = const(a)
    shape = a.shape
    kshape = _keepdims_shape(shape, axis)
    return _node(
        "sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,),
        lambda g: (broadcast_to(reshape(g, kshape), shape),),
        lambda g: (np.broadcast_to(np.reshape(g, kshape), shape),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = const(a)
    n = a.value.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    if n == 0:
        raise AutodiffError(f"mean over an empty axis of {a.describe()}")
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Var:
    a = const(a)
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise AutodiffError(f"reshape: cannot view {a.describe()} {old} as {shape}") from None
    return _node(
        "reshape", value, (a,), lambda g: (reshape(g, old),), lambda g: (np.reshape(g, old),)
    )


def transpose(a) -> Var:
    a = const(a)
    return _node("transpose", a.value.T, (a,), lambda g: (transpose(g),), lambda g: (g.T,))


def broadcast_to(a, shape) -> Var:
    a = const(a)
    old = a.shape
    shape = tuple(shape)
    if old == shape:
        return a
    return _node(
        "broadcast_to", np.broadcast_to(a.value, shape), (a,),
        lambda g: (sum_to(g, old),),
        lambda g: (_unbroadcast(g, old),),
    )


def sum_to(a, shape) -> Var:
    """Sum a broadcast result back down to ``shape``."""
    a = const(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    old = a.shape
    return _node(
        "sum_to", _unbroadcast(a.value, shape), (a,),
        lambda g: (broadcast_to(g, old),),
        lambda g: (np.broadcast_to(g, old),),
    )


def getitem(a, key) -> Var:
    a = const(a)
    shape = a.shape

    def np_vjp(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _node(
        "getitem", np.asarray(a.value[key], dtype=np.float64), (a,),
        lambda g: (_scatter(g, key, shape),),
        np_vjp,
    )


def _scatter(g, key, shape) -> Var:
    g = const(g)
    value = np.zeros(shape)
    value[key] = g.value
    return _node("scatter", value, (g,), lambda h: (getitem(h, key),), lambda h: (h[key],))


def concat(parts: Sequence, axis: int = -1) -> Var:
    """Join arrays along ``axis``; the gradient is split back into the pieces."""
    parts = tuple(const(p) for p in parts)
    if not parts:
        raise AutodiffError("concat of an empty list")
    ax = axis % parts[0].ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != ax
        ):
            raise ShapeError("concat", parts[0], p)
    keys = [
        (slice(None),) * ax + (slice(int(bounds[i]), int(bounds[i + 1])),)
        for i in range(len(parts))
    ]

    def vjp(g):
        return tuple(getitem(g, k) if p.requires_grad else None for p, k in zip(parts, keys))

    def np_vjp(g):
        return tuple(g[k] if p.requires_grad else None for p, k in zip(parts, keys))

    return _node("concat", np.concatenate([p.value for p in parts], axis=ax), parts, vjp, np_vjp)


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a, b, "expected (m, k) @ (k, n)")
    av, bv = a.value, b.value

    def vjp(g):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    def np_vjp(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _node("matmul", av @ bv, (a, b), vjp, np_vjp)


def norm(a) -> Var:
    """Euclidean norm of all entries. The gradient at the origin is taken as 0."""
    a = const(a)
    av = a.value
    value = np.array(np.sqrt(np.sum(av * av)))
    out: Var
    out = _node(
        "norm", value, (a,),
        lambda g: (g * a / clip_min(out, 1e-300),),
        lambda g: (g * av / max(float(value), 1e-300),),
    )
    return out


def logsumexp(a, axis: int = -1) -> Var:
    """Stable log-sum-exp along ``axis`` (the axis is kept, size 1)."""
    a = const(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    value = m + np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True))
    out: Var
    out = _node(
        "logsumexp", value, (a,),
        lambda g: (g * exp(a - out),),
        lambda g: (g * np.exp(av - value),),
    )
    return out


# -- graph traversal --------------------------------------------------------


def topological_order(root: Var) -> list[Var]:
    """Nodes reachable from ``root`` that require grad, parents first.

    Sorting by id is a valid topological order because ids increase with
    creation and every parent exists before its child.
    """
    seen: dict[int, Var] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return [seen[k] for k in sorted(seen)]


def forward_eval(fn: Callable[..., Var], inputs: dict[str, object]) -> tuple[Var, dict[str, Var]]:
    """Bind named inputs as leaves and evaluate ``fn(**leaves)``.

    Returns the output node and the leaves, so gradients can be requested
    with respect to any input.
    """
    leaves = {k: leaf(v, name=k) for k, v in inputs.items()}
    out = fn(**leaves)
    if not isinstance(out, Var):
        out = const(out)
    return out, leaves


def grad(
    loss: Var,
    wrt: Sequence[Var],
    record: bool = False,
) -> list[Var]:
    """Gradients of a scalar ``loss`` with respect to each node in ``wrt``.

    With ``record=True`` the backward pass is itself built from graph nodes,
    so the returned gradients can be differentiated again. Inputs that do not
    influence ``loss`` get a zero gradient.
    """
    if not loss.requires_grad:
        raise GradientError(
            f"{loss.describe()} is not attached to any differentiable input; "
            "if it is a gradient, the earlier backward pass needs record=True"
        )
    if loss.value.size != 1:
        raise GradientError(f"loss {loss.describe()} must be scalar, got shape {loss.shape}")
    order = topological_order(loss)
    wanted = {w.id for w in wrt}
    if record:
        grads: dict[int, object] = {loss.id: Var(np.ones_like(loss.value))}
        with _recording(True):
            for node in reversed(order):
                g = grads.get(node.id) if node.id in wanted else grads.pop(node.id, None)
                if g is None or node._vjp is None:
                    continue
                for parent, pg in zip(node.parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(parent.id)
                    grads[parent.id] = pg if prev is None else add(prev, pg)
        return [grads.get(w.id) or Var(np.zeros_like(w.value)) for w in wrt]

    grads = {loss.id: np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.get(node.id) if node.id in wanted else grads.pop(node.id, None)
        if g is None or node._np_vjp is None:
            continue
        for parent, pg in zip(node.parents, node._np_vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    out = []
    for w in wrt:
        g = grads.get(w.id)
        out.append(Var(np.zeros_like(w.value) if g is None else np.array(g, dtype=np.float64)))
    return out


def backward(loss: Var, record: bool = False) -> dict[Var, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    leaves = [n for n in topological_order(loss) if not n.parents]
    gs = grad(loss, leaves, record=record)
    result = {}
    for node, g in zip(leaves, gs):
        node.grad = g.value
        result[node] = g.value
    return result


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Iterable[np.ndarray]) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update with bias correction; returns new arrays and state.

    Weight decay is the coupled L2 form: ``weight_decay * p`` is added to the
    gradient before the moment estimates.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if state.t < 0:
        raise ValueError(f"Adam step count must be >= 0, got {state.t}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and Adam moments differ in length")
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in Adam: param {p.shape}, grad {g.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: AdamState | None = field(default=None, repr=False)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        new, self.state = adam_step(
            params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay
        )
        return new
