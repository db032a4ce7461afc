"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 array and records, for every parent, a
vector-Jacobian closure. :func:`backward` walks the recorded graph in reverse
topological order and accumulates gradients additively, so shared
subexpressions receive the sum of all their contributions.

Elementwise primitives are exposed both as functions (``ad.sin(t)``) and via
numpy's ufunc protocol (``np.sin(t)``), which lets numeric code such as the
kinematic rollout run unchanged on plain arrays or on tensors.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "EvaluationError",
    "Tensor",
    "ParameterStore",
    "AdamState",
    "adam_step",
    "backward",
    "tensor",
]


class EvaluationError(ArithmeticError):
    """Raised when a primitive is evaluated outside its domain."""


class GraphError(RuntimeError):
    """Raised for malformed graphs (cycles, non-scalar roots)."""


Vjp = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """A node of the computation graph.

    Attributes:
        value: forward value, always a float64 ndarray (0-d for scalars).
        grad: gradient accumulator, filled by :func:`backward`.
        requires_grad: whether gradients flow to (or through) this node.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "name", "__weakref__")
    __array_priority__ = 1000.0

    def __init__(self, value, parents: tuple = (), requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[tuple[Tensor, Vjp], ...] = parents
        self.name = name

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor({self.value!r}{tag})"

    def __len__(self) -> int:
        return len(self.value)

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- numpy interop ----------------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        op = _UFUNCS.get(ufunc)
        if op is None:
            return NotImplemented
        return op(*inputs)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Create a leaf tensor."""
    return Tensor(value, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(value, inputs: Sequence[Tensor], vjps: Sequence[Vjp]) -> Tensor:
    parents = tuple((t, f) for t, f in zip(inputs, vjps) if t.requires_grad)
    return Tensor(value, parents=parents, requires_grad=bool(parents))


def _binary(a, b, value_fn, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = value_fn(a.value, b.value)
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(da(g, a.value, b.value, out), a.shape),
            lambda g: _unbroadcast(db(g, a.value, b.value, out), b.shape),
        ),
    )


def _unary(a, value_fn, d) -> Tensor:
    a = _as_tensor(a)
    out = value_fn(a.value)
    return _make(out, (a,), (lambda g: d(g, a.value, out),))


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    b_val = _as_tensor(b).value
    if np.any(b_val == 0.0):
        raise EvaluationError("division by zero")
    return _binary(
        a,
        b,
        np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
    )


def neg(a) -> Tensor:
    return _unary(a, np.negative, lambda g, x, o: -g)


def power(a, exponent: float) -> Tensor:
    exponent = float(exponent)
    return _unary(a, lambda x: np.power(x, exponent), lambda g, x, o: g * exponent * np.power(x, exponent - 1.0))


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda g, x, o: g * np.cos(x))


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda g, x, o: -g * np.sin(x))


def tan(a) -> Tensor:
    return _unary(a, np.tan, lambda g, x, o: g * (1.0 + o * o))


def atan(a) -> Tensor:
    return _unary(a, np.arctan, lambda g, x, o: g / (1.0 + x * x))


def atan2(y, x) -> Tensor:
    y, x = _as_tensor(y), _as_tensor(x)
    r2 = y.value * y.value + x.value * x.value
    if np.any(r2 == 0.0):
        raise EvaluationError("atan2 is not differentiable at the origin")
    return _binary(
        y,
        x,
        np.arctan2,
        lambda g, yv, xv, o: g * xv / r2,
        lambda g, yv, xv, o: -g * yv / r2,
    )


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a) -> Tensor:
    if np.any(_as_tensor(a).value <= 0.0):
        raise EvaluationError("log of a non-positive value")
    return _unary(a, np.log, lambda g, x, o: g / x)


def sqrt(a) -> Tensor:
    if np.any(_as_tensor(a).value < 0.0):
        raise EvaluationError("sqrt of a negative value")

    def d(g, x, o):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(o > 0.0, g * 0.5 / np.where(o > 0.0, o, 1.0), 0.0)

    return _unary(a, np.sqrt, d)


def hypot(a, b) -> Tensor:
    """Euclidean norm of (a, b); the subgradient at the origin is taken as 0."""

    def d_first(g, x, y, o):
        safe = np.where(o > 0.0, o, 1.0)
        return np.where(o > 0.0, g * x / safe, 0.0)

    def d_second(g, x, y, o):
        safe = np.where(o > 0.0, o, 1.0)
        return np.where(o > 0.0, g * y / safe, 0.0)

    return _binary(a, b, np.hypot, d_first, d_second)


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0.0))


def clamp(a, lo, hi) -> Tensor:
    """Clip ``a`` to [lo, hi].

    The partial is 1 strictly inside the interval and 0 outside or exactly
    on a boundary. ``lo``/``hi`` may be arrays broadcastable to ``a``.
    """
    a = _as_tensor(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("clamp requires lo <= hi")
    out = np.minimum(np.maximum(a.value, lo), hi)
    inside = (a.value > lo) & (a.value < hi)
    return _make(out, (a,), (lambda g: g * inside,))


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value @ b.value

    def da(g):
        if b.ndim == 1:
            return _unbroadcast(np.multiply.outer(g, b.value), a.shape)
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)

    def db(g):
        if a.ndim == 1:
            return _unbroadcast(np.multiply.outer(a.value, g), b.shape)
        if b.ndim == 1:
            return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g[..., None], b.shape + (1,)).reshape(b.shape)
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)

    return _make(out, (a, b), (da, db))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def d(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _make(out, (a,), (d,))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.value.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), (lambda g: np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    out = a.value[index]

    def d(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return full

    return _make(np.array(out), (a,), (d,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])
    vjps = []
    for i in range(len(ts)):
        lo, hi = bounds[i], bounds[i + 1]

        def d(g, lo=lo, hi=hi):
            return np.take(g, np.arange(lo, hi), axis=axis)

        vjps.append(d)
    return _make(out, ts, vjps)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in ts], axis=axis)
    vjps = [lambda g, i=i: np.take(g, i, axis=axis) for i in range(len(ts))]
    return _make(out, ts, vjps)


def cumsum(a, axis: int = -1) -> Tensor:
    """Sequential prefix sum (numpy accumulates left to right)."""
    a = _as_tensor(a)
    out = np.cumsum(a.value, axis=axis)

    def d(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _make(out, (a,), (d,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), (lambda g: g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


_UFUNCS = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.negative: neg,
    np.sin: sin,
    np.cos: cos,
    np.tan: tan,
    np.arctan: atan,
    np.arctan2: atan2,
    np.exp: exp,
    np.log: log,
    np.sqrt: sqrt,
    np.tanh: tanh,
    np.hypot: hypot,
    np.matmul: matmul,
}


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack_: list[tuple[Tensor, Iterator]] = [(root, iter(root._parents))]
    state[id(root)] = 1
    while stack_:
        node, parents = stack_[-1]
        advanced = False
        for parent, _ in parents:
            mark = state.get(id(parent))
            if mark == 1:
                raise GraphError("cycle detected in computation graph")
            if mark is None:
                state[id(parent)] = 1
                stack_.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            stack_.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(root: Tensor, store: "ParameterStore | None" = None) -> list[np.ndarray] | None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Args:
        root: scalar tensor (size 1).
        store: if given, the parameter gradients are returned in store order
            (zeros for parameters the root does not depend on).
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    if store is not None:
        for p in store.values():
            p.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64)
            else:
                parent.grad = parent.grad + contrib
    if store is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in store.values()]


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named trainable arrays with a fixed, insertion-ordered iteration."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        """Register an array. Non-trainable entries are fixed buffers the optimizer never moves."""
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def trainable(self, name: str) -> bool:
        return self._params[name].requires_grad

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        current = self._params[name]
        if value.shape != current.shape:
            raise ValueError(f"shape of {name!r} is fixed at {current.shape}, got {value.shape}")
        current.value = value.copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        """Read-only copies of every parameter."""
        out = {}
        for name, t in self._params.items():
            arr = t.value.copy()
            arr.flags.writeable = False
            out[name] = arr
        return out

    def num_scalars(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def to_json(self) -> list[dict]:
        out = []
        for name, t in self._params.items():
            entry = {"name": name, "shape": list(t.shape), "data": t.value.ravel().tolist()}
            if not t.requires_grad:
                entry["trainable"] = False
            out.append(entry)
        return out

    @classmethod
    def from_json(cls, entries: Iterable[dict]) -> "ParameterStore":
        store = cls()
        for entry in entries:
            shape = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise ValueError(f"parameter {entry['name']!r}: data does not match shape {shape}")
            store.add(entry["name"], data.reshape(shape), trainable=bool(entry.get("trainable", True)))
        return store


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "m": [a.ravel().tolist() for a in self.m],
            "v": [a.ravel().tolist() for a in self.v],
        }

    @classmethod
    def from_json(cls, obj: dict, store: ParameterStore) -> "AdamState":
        shapes = [p.shape for p in store.values()]
        m = [np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(obj.get("m", []), shapes)]
        v = [np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(obj.get("v", []), shapes)]
        return cls(step=int(obj.get("step", 0)), m=m, v=v)


def adam_step(
    store: ParameterStore,
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``store`` in place."""
    params = store.values()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradients, got {len(grads)}")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.name!r} {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad:
            continue
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


def checkpoint_dict(store: ParameterStore, optimizer: AdamState | None = None, **extra) -> dict:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "params": store.to_json(),
        "optimizer_state": optimizer.to_json() if optimizer is not None else None,
    }
    doc.update(extra)
    return doc


def dumps_checkpoint(doc: dict) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(doc, allow_nan=False, sort_keys=False) + "\n"


def load_checkpoint(text: str) -> tuple[ParameterStore, AdamState | None, dict]:
    doc = json.loads(text)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    store = ParameterStore.from_json(doc["params"])
    opt = doc.get("optimizer_state")
    state = AdamState.from_json(opt, store) if opt else None
    return store, state, doc


def numeric_gradient(f: Callable[[], float], store: ParameterStore, step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of ``f`` with respect to every trainable parameter (zeros for buffers)."""
    grads = []
    for p in store.values():
        g = np.zeros_like(p.value)
        if not p.requires_grad:
            grads.append(g)
            continue
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def is_finite(x) -> bool:
    v = x.value if isinstance(x, Tensor) else x
    return bool(np.all(np.isfinite(v)))
