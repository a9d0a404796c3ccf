"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operators the recommender needs are provided. A :class:`Tape`
records every operation whose inputs are tracked; :func:`backward` walks
the tape once in reverse creation order, which is a valid topological
order because a node can only be created after its inputs.

Also holds the trainable :class:`ParameterStore`, the :class:`Adam`
optimizer and checkpoint serialization.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MGACLError, NumericError, ShapeError

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "gather_rows",
    "add",
    "sub",
    "scale",
    "elementwise_mul",
    "dot",
    "matvec",
    "pairwise_dot",
    "softmax",
    "weighted_sum",
    "sigmoid",
    "log",
    "logsumexp",
    "l2_norm_sq",
    "mean",
    "sum_",
    "concat",
    "reshape",
    "ParameterStore",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_CLAMP = 1e-12


class Tape:
    """Ordered record of operations for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.backward_visits = 0

    def param(self, data, name=None) -> "Tensor":
        """Register a leaf tensor whose gradient is wanted."""
        t = Tensor(np.asarray(data, dtype=np.float64), tape=self, name=name)
        self.nodes.append(t)
        return t

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "grad", "tape", "parents", "_backward", "name")

    def __init__(self, data, tape=None, parents=(), backward_fn=None, name=None):
        self.data = data
        self.grad = None
        self.tape = tape
        self.parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, tracked={self.tape is not None})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return elementwise_mul(self, other)

    __rmul__ = __mul__


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise MGACLError("tensors recorded on different tapes")
            tape = t.tape
    return tape


def _record(name, data, parents, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name} produced non-finite values")
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    out = Tensor(data, tape=tape, parents=parents, backward_fn=backward_fn)
    tape.nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(node) into ``.grad`` for every node on ``tape``.

    Returns a mapping from leaf name (or the leaf itself when unnamed) to its
    gradient. Leaves that do not influence ``loss`` get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise MGACLError("loss was not recorded on this tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    tape.backward_visits = 0
    for node in reversed(tape.nodes):
        tape.backward_visits += 1
        if node.grad is None or node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or parent.tape is not tape:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    out = {}
    for node in tape.nodes:
        if node.parents or node._backward is not None:
            continue
        g = node.grad if node.grad is not None else np.zeros_like(node.data)
        node.grad = g
        out[node.name if node.name is not None else node] = g
    return out


# ----------------------------------------------------------------------
# forward operators
# ----------------------------------------------------------------------


def gather_rows(table, idx) -> Tensor:
    """``table[idx]`` for an integer index array of any shape."""
    table = _lift(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim < 1:
        raise ShapeError(f"gather_rows: table must be at least 1-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for table of shape {table.shape}"
        )

    def bwd(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (out,)

    return _record("gather_rows", table.data[idx], (table,), bwd)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def elementwise_mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("elementwise_mul", a, b)
    return _record(
        "elementwise_mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def dot(a, b) -> Tensor:
    """Inner product over the last axis; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    _check_broadcast("dot", a, b)

    def bwd(g):
        g = g[..., None]
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("dot", np.sum(a.data * b.data, axis=-1), (a, b), bwd)


def matvec(mat, vec) -> Tensor:
    """``(..., n, d) x (..., d) -> (..., n)`` with broadcasting leading axes."""
    mat, vec = _lift(mat), _lift(vec)
    if mat.ndim < 2 or vec.ndim < 1 or mat.shape[-1] != vec.shape[-1]:
        raise ShapeError(f"matvec: incompatible shapes {mat.shape} and {vec.shape}")
    try:
        np.broadcast_shapes(mat.shape[:-2], vec.shape[:-1])
    except ValueError:
        raise ShapeError(
            f"matvec: incompatible shapes {mat.shape} and {vec.shape}"
        ) from None
    out = np.matmul(mat.data, vec.data[..., None])[..., 0]

    def bwd(g):
        g_mat = g[..., :, None] * vec.data[..., None, :]
        g_vec = np.matmul(g[..., None, :], mat.data)[..., 0, :]
        return _unbroadcast(g_mat, mat.shape), _unbroadcast(g_vec, vec.shape)

    return _record("matvec", out, (mat, vec), bwd)


def pairwise_dot(a, b) -> Tensor:
    """All inner products between rows: ``(n, d), (m, d) -> (n, m)``."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_dot: incompatible shapes {a.shape} and {b.shape}")
    return _record(
        "pairwise_dot",
        a.data @ b.data.T,
        (a, b),
        lambda g: (g @ b.data, g.T @ a.data),
    )


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _record("softmax", s, (x,), bwd)


def weighted_sum(weights, values) -> Tensor:
    """``sum_i w_i * v_i``: ``(..., n), (..., n, d) -> (..., d)``."""
    weights, values = _lift(weights), _lift(values)
    if values.ndim < 2 or weights.shape[-1] != values.shape[-2]:
        raise ShapeError(
            f"weighted_sum: incompatible shapes {weights.shape} and {values.shape}"
        )
    out = np.matmul(weights.data[..., None, :], values.data)[..., 0, :]

    def bwd(g):
        g_w = np.matmul(values.data, g[..., :, None])[..., 0]
        g_v = weights.data[..., :, None] * g[..., None, :]
        return _unbroadcast(g_w, weights.shape), _unbroadcast(g_v, values.shape)

    return _record("weighted_sum", out, (weights, values), bwd)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    s[~pos] = ez / (1.0 + ez)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x) -> Tensor:
    """Natural log with the input clamped to at least 1e-12."""
    x = _lift(x)
    clamped = np.maximum(x.data, LOG_CLAMP)
    live = x.data > LOG_CLAMP
    return _record("log", np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def logsumexp(x, mask=None, axis: int = -1) -> Tensor:
    """Stable ``log(sum(exp(x)))`` over ``axis``; masked-out entries are ignored.

    Every slice must keep at least one entry.
    """
    x = _lift(x)
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(keep.any(axis=axis)):
        raise ShapeError("logsumexp: a slice has every entry masked out")
    masked = np.where(keep, x.data, -np.inf)
    m = np.max(masked, axis=axis, keepdims=True)
    e = np.where(keep, np.exp(masked - m), 0.0)
    total = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=axis)
    p = e / total

    def bwd(g):
        return (np.expand_dims(g, axis) * p,)

    return _record("logsumexp", out, (x,), bwd)


def l2_norm_sq(a) -> Tensor:
    a = _lift(a)
    return _record("l2_norm_sq", np.sum(a.data * a.data), (a,), lambda g: (2.0 * g * a.data,))


def sum_(a, axis=None) -> Tensor:
    a = _lift(a)
    out = np.sum(a.data, axis=axis)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean of an empty array")
    return scale(sum_(a, axis=axis), 1.0 / n)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(tensors), bwd)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


# ----------------------------------------------------------------------
# parameters and optimization
# ----------------------------------------------------------------------

PARAM_NAMES = ("user", "entity", "relation", "gcn_w", "gcn_b")


@dataclass
class ParameterStore:
    """All trainable tensors.

    The relation table carries one extra trailing row for the synthetic
    user-clicks-item relation.
    """

    user: np.ndarray
    entity: np.ndarray
    relation: np.ndarray
    gcn_w: np.ndarray
    gcn_b: np.ndarray

    @classmethod
    def init(cls, num_users, num_entities, num_relations, dim, rng) -> "ParameterStore":
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        bound = 1.0 / np.sqrt(dim)

        def table(rows):
            return rng.uniform(-bound, bound, size=(rows, dim))

        return cls(
            user=table(num_users),
            entity=table(num_entities),
            relation=table(num_relations + 1),
            gcn_w=rng.uniform(-bound, bound, size=dim),
            gcn_b=np.zeros(()),
        )

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    @property
    def click_relation(self) -> int:
        return self.relation.shape[0] - 1

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def copy(self) -> "ParameterStore":
        return ParameterStore(**{k: v.copy() for k, v in self.items()})

    def validate(self):
        d = self.dim
        for name in ("user", "entity", "relation"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[1] != d:
                raise ShapeError(f"{name} table has shape {arr.shape}, expected (*, {d})")
        if self.gcn_w.shape != (d,):
            raise ShapeError(f"gcn_w has shape {self.gcn_w.shape}, expected ({d},)")
        if self.gcn_b.shape != ():
            raise ShapeError(f"gcn_b must be a scalar, got shape {self.gcn_b.shape}")


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def step(self, store: ParameterStore, grads: dict) -> ParameterStore:
        """Apply one bias-corrected Adam update in place and return ``store``."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, value in store.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(value)
            elif g.shape != value.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * value
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return store


CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParameterStore, meta: dict | None = None):
    """Write parameters as an uncompressed ``.npz``; float64 values round-trip exactly."""
    arrays = {name: value for name, value in store.items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise MGACLError(f"unsupported checkpoint version {version}")
        store = ParameterStore(**{name: data[name].copy() for name in PARAM_NAMES})
        meta = json.loads(str(data["__meta__"]))
    store.validate()
    return store, meta


def store_to_json(store: ParameterStore) -> str:
    return json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "params": {
                name: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                for name, v in store.items()
            },
        }
    )


def store_from_json(text: str) -> ParameterStore:
    doc = json.loads(text)
    params = {
        name: np.asarray(p["values"], dtype=np.float64).reshape(p["shape"])
        for name, p in doc["params"].items()
    }
    store = ParameterStore(**params)
    store.validate()
    return store
