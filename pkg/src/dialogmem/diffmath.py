"""
Dense float64 array math with a reverse-mode tape, Adam, and gradient clipping.

Values are plain ``numpy.ndarray`` objects (float64). A :class:`Graph` records
every operation applied to its nodes in execution order, so the node list is
already topologically sorted and :func:`backward` is a single reverse sweep.

Ops broadcast like numpy; the vector-Jacobian products sum gradients back to
the shape of each input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from scipy import sparse

from .errors import ContractError, DegenerateNormError, DeterminismError, ShapeError

NORM_FLOOR = 1e-12
DTYPE = np.float64


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {list(shapes)}") from None


# ---------------------------------------------------------------------------
# op table: kind -> (forward(values, attrs), vjp(grad, values, out, attrs))
# ---------------------------------------------------------------------------

def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2:
        _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    return a @ b


def _matmul_vjp(g, vals, out, attrs):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if b.ndim == 2 and a.ndim >= 2:
        # fold leading axes into rows instead of materialising (..., k, p)
        k, p = b.shape
        ga = g @ b.T
        gb = a.reshape(-1, k).T @ g.reshape(-1, p)
        return ga, gb
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = g2 @ np.swapaxes(b2, -1, -2)
    gb = np.swapaxes(a2, -1, -2) @ g2
    if a.ndim == 1:
        ga = _unbroadcast(ga, (1,) + a.shape if ga.ndim > 1 else a.shape).reshape(a.shape)
    else:
        ga = _unbroadcast(ga, a.shape)
    if b.ndim == 1:
        gb = _unbroadcast(gb, b.shape + (1,)).reshape(b.shape)
    else:
        gb = _unbroadcast(gb, b.shape)
    return ga, gb


def _add_fwd(vals, attrs):
    _broadcast_shape("add", *(v.shape for v in vals))
    out = vals[0]
    for v in vals[1:]:
        out = out + v
    return out


def _add_vjp(g, vals, out, attrs):
    return tuple(_unbroadcast(g, v.shape) for v in vals)


def _mul_fwd(vals, attrs):
    a, b = vals
    _broadcast_shape("elementwise_mul", a.shape, b.shape)
    return a * b


def _mul_vjp(g, vals, out, attrs):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _dot_fwd(vals, attrs):
    a, b = vals
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: last dimensions differ, shapes {a.shape} and {b.shape}")
    _broadcast_shape("dot", a.shape, b.shape)
    return np.sum(a * b, axis=-1)


def _dot_vjp(g, vals, out, attrs):
    a, b = vals
    g = g[..., None]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _sigmoid_fwd(vals, attrs):
    (x,) = vals
    # split by sign to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_vjp(g, vals, out, attrs):
    return (g * out * (1.0 - out),)


def _relu_fwd(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _relu_vjp(g, vals, out, attrs):
    return (g * (vals[0] > 0),)


def _softmax_fwd(vals, attrs):
    (x,) = vals
    shifted = x - np.max(x, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def _softmax_vjp(g, vals, out, attrs):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


def _l2norm_fwd(vals, attrs):
    (x,) = vals
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm < NORM_FLOOR):
        raise DegenerateNormError(
            f"l2normalize: input norm {float(norm.min()):.3e} below {NORM_FLOOR:g}"
        )
    return x / norm


def _l2norm_vjp(g, vals, out, attrs):
    (x,) = vals
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norm,)


def _concat_fwd(vals, attrs):
    axis = attrs.get("axis", -1)
    shapes = [list(v.shape) for v in vals]
    ref = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(ref):
            raise ShapeError(f"concat: rank mismatch {shapes}")
        a = axis % len(ref)
        if s[:a] + s[a + 1:] != ref[:a] + ref[a + 1:]:
            raise ShapeError(f"concat: shapes {shapes} differ off axis {axis}")
    return np.concatenate(vals, axis=axis)


def _concat_vjp(g, vals, out, attrs):
    axis = attrs.get("axis", -1)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _scale_fwd(vals, attrs):
    return vals[0] * attrs["factor"]


def _scale_vjp(g, vals, out, attrs):
    return (g * attrs["factor"],)


def _embed_fwd(vals, attrs):
    (table,) = vals
    idx = attrs["indices"]
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: index out of range for table {table.shape}")
    return table[idx]


def _embed_vjp(g, vals, out, attrs):
    (table,) = vals
    idx = attrs["indices"].reshape(-1)
    # scatter-add as a sparse one-hot product; much faster than np.add.at
    onehot = sparse.csr_matrix(
        (np.ones(idx.size), (idx, np.arange(idx.size))), shape=(table.shape[0], idx.size)
    )
    return (np.asarray(onehot @ g.reshape(-1, table.shape[1])),)


def _dropout_fwd(vals, attrs):
    (x,) = vals
    mask = attrs["mask"]
    _broadcast_shape("dropout", x.shape, mask.shape)
    return x * mask / attrs["keep"]


def _dropout_vjp(g, vals, out, attrs):
    return (_unbroadcast(g * attrs["mask"] / attrs["keep"], vals[0].shape),)


def _reduce_sum_fwd(vals, attrs):
    return np.sum(vals[0], axis=attrs.get("axis"))


def _reduce_sum_vjp(g, vals, out, attrs):
    (x,) = vals
    axis = attrs.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_fwd(vals, attrs):
    return np.asarray(np.mean(vals[0]))


def _mean_vjp(g, vals, out, attrs):
    (x,) = vals
    return (np.full(x.shape, float(g) / x.size),)


def _reshape_fwd(vals, attrs):
    try:
        return vals[0].reshape(attrs["shape"])
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {vals[0].shape} to {attrs['shape']}") from None


def _reshape_vjp(g, vals, out, attrs):
    return (g.reshape(vals[0].shape),)


def _transpose_fwd(vals, attrs):
    if vals[0].ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got {vals[0].shape}")
    return np.swapaxes(vals[0], -1, -2)


def _transpose_vjp(g, vals, out, attrs):
    return (np.swapaxes(g, -1, -2),)


def _broadcast_to_fwd(vals, attrs):
    shape = tuple(attrs["shape"])
    _broadcast_shape("broadcast_to", vals[0].shape, shape)
    return np.broadcast_to(vals[0], shape).copy()


def _broadcast_to_vjp(g, vals, out, attrs):
    return (_unbroadcast(g, vals[0].shape),)


def _getitem_fwd(vals, attrs):
    return vals[0][attrs["index"]]


def _getitem_vjp(g, vals, out, attrs):
    grad = np.zeros_like(vals[0])
    idx = attrs["index"]
    if _is_basic_index(idx):
        grad[idx] += g
    else:
        np.add.at(grad, idx, g)
    return (grad,)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis for p in parts)


def _blend_fwd(vals, attrs):
    a, b = vals
    m = attrs["mask"]
    _broadcast_shape("blend", a.shape, b.shape, m.shape)
    return m * a + (1.0 - m) * b


def _blend_vjp(g, vals, out, attrs):
    a, b = vals
    m = attrs["mask"]
    return _unbroadcast(g * m, a.shape), _unbroadcast(g * (1.0 - m), b.shape)


def _log_fwd(vals, attrs):
    return np.log(np.maximum(vals[0], attrs.get("floor", 0.0)))


def _log_vjp(g, vals, out, attrs):
    x = vals[0]
    floor = attrs.get("floor", 0.0)
    return (np.where(x > floor, g / np.maximum(x, floor if floor > 0 else 1e-300), 0.0),)


def _take_fwd(vals, attrs):
    (x,) = vals
    idx = attrs["indices"]
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"take: expected (B, c) values and (B,) indices, got {x.shape}, {idx.shape}")
    return x[np.arange(x.shape[0]), idx]


def _take_vjp(g, vals, out, attrs):
    (x,) = vals
    grad = np.zeros_like(x)
    grad[np.arange(x.shape[0]), attrs["indices"]] = g
    return (grad,)


OPS: Dict[str, tuple] = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (_add_fwd, _add_vjp),
    "elementwise_mul": (_mul_fwd, _mul_vjp),
    "dot": (_dot_fwd, _dot_vjp),
    "sigmoid": (_sigmoid_fwd, _sigmoid_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "softmax": (_softmax_fwd, _softmax_vjp),
    "l2normalize": (_l2norm_fwd, _l2norm_vjp),
    "concat": (_concat_fwd, _concat_vjp),
    "scale": (_scale_fwd, _scale_vjp),
    "embed_lookup": (_embed_fwd, _embed_vjp),
    "dropout": (_dropout_fwd, _dropout_vjp),
    # structural helpers needed for batched evaluation
    "reduce_sum": (_reduce_sum_fwd, _reduce_sum_vjp),
    "mean": (_mean_fwd, _mean_vjp),
    "reshape": (_reshape_fwd, _reshape_vjp),
    "transpose": (_transpose_fwd, _transpose_vjp),
    "broadcast_to": (_broadcast_to_fwd, _broadcast_to_vjp),
    "getitem": (_getitem_fwd, _getitem_vjp),
    "blend": (_blend_fwd, _blend_vjp),
    "log": (_log_fwd, _log_vjp),
    "take": (_take_fwd, _take_vjp),
}


def _as_array(x):
    return np.asarray(x, dtype=DTYPE)


def forward_op(kind: str, inputs: Sequence, **attrs) -> np.ndarray:
    """Evaluate a single op on concrete arrays, outside any graph."""
    if kind not in OPS:
        raise ContractError(f"unknown op kind {kind!r}")
    out = OPS[kind][0]([_as_array(x) for x in inputs], attrs)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{kind}: non-finite output")
    return out


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("id", "op", "inputs", "value", "grad", "attrs", "name", "requires_grad")

    def __init__(self, id, op, inputs, value, attrs=None, name=None, requires_grad=False):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs or {}
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} {self.value.shape}>"


class Graph:
    """Append-only record of operations; node ids are execution order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.params: Dict[str, Node] = {}

    def _push(self, op, inputs, value, attrs=None, name=None, requires_grad=False):
        node = Node(len(self.nodes), op, inputs, value, attrs, name, requires_grad)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        node = self._push("param", (), _as_array(value), name=name, requires_grad=True)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return self._push("const", (), _as_array(value))

    def apply(self, kind: str, *inputs: Node, **attrs) -> Node:
        try:
            fwd = OPS[kind][0]
        except KeyError:
            raise ContractError(f"unknown op kind {kind!r}") from None
        value = fwd([n.value for n in inputs], attrs)
        needs = any(n.requires_grad for n in inputs)
        return self._push(kind, tuple(n.id for n in inputs), value, attrs, requires_grad=needs)

    # thin wrappers keep model code readable
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, *xs):
        return self.apply("add", *xs)

    def mul(self, a, b):
        return self.apply("elementwise_mul", a, b)

    def dot(self, a, b):
        return self.apply("dot", a, b)

    def sigmoid(self, x):
        return self.apply("sigmoid", x)

    def relu(self, x):
        return self.apply("relu", x)

    def softmax(self, x):
        return self.apply("softmax", x)

    def l2normalize(self, x):
        return self.apply("l2normalize", x)

    def concat(self, xs, axis=-1):
        return self.apply("concat", *xs, axis=axis)

    def scale(self, x, factor):
        return self.apply("scale", x, factor=float(factor))

    def embed(self, table, indices):
        return self.apply("embed_lookup", table, indices=np.asarray(indices, dtype=np.int64))

    def dropout(self, x, mask, keep):
        return self.apply("dropout", x, mask=mask, keep=float(keep))

    def sum(self, x, axis=None):
        return self.apply("reduce_sum", x, axis=axis)

    def mean(self, x):
        return self.apply("mean", x)

    def reshape(self, x, shape):
        return self.apply("reshape", x, shape=tuple(shape))

    def T(self, x):
        return self.apply("transpose", x)

    def broadcast_to(self, x, shape):
        return self.apply("broadcast_to", x, shape=tuple(shape))

    def getitem(self, x, index):
        return self.apply("getitem", x, index=index)

    def blend(self, a, b, mask):
        return self.apply("blend", a, b, mask=mask)

    def log(self, x, floor=0.0):
        return self.apply("log", x, floor=float(floor))

    def take(self, x, indices):
        return self.apply("take", x, indices=np.asarray(indices, dtype=np.int64))


def backward(graph: Graph, loss: Node) -> Dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns ``{param name: gradient}``."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    nodes = graph.nodes
    for n in nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(nodes[: loss.id + 1]):
        if node.grad is None or not node.inputs:
            continue
        vjp = OPS[node.op][1]
        parents = [nodes[i] for i in node.inputs]
        grads = vjp(node.grad, [p.value for p in parents], node.value, node.attrs)
        for p, gp in zip(parents, grads):
            if not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = gp
            else:
                p.grad = p.grad + gp
    out = {}
    for name, node in graph.params.items():
        g = node.grad if node.grad is not None else np.zeros_like(node.value)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# finite-difference check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    tol: float
    n_checked: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def grad_check(
    loss_and_grads: Callable[[Mapping[str, np.ndarray]], tuple],
    params: Dict[str, np.ndarray],
    eps: float = 1e-4,
    tol: float = 1e-3,
    names: Optional[Iterable[str]] = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    ``loss_and_grads(params)`` must return ``(loss: float, grads: dict)`` and be
    a deterministic function of ``params``; the arrays in ``params`` are
    perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    loss0, grads = loss_and_grads(params)
    loss_again, _ = loss_and_grads(params)
    if loss0 != loss_again:
        raise DeterminismError(f"builder returned {loss0!r} then {loss_again!r} for identical params")
    report = {}
    count = 0
    for name in names or list(params):
        p = params[name]
        g_ad = grads[name]
        worst = 0.0
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = loss_and_grads(params)
            flat[i] = orig - eps
            down, _ = loss_and_grads(params)
            flat[i] = orig
            g_fd = (up - down) / (2 * eps)
            a = float(g_ad.reshape(-1)[i])
            rel = abs(a - g_fd) / max(abs(a) + abs(g_fd), 1e-8)
            worst = max(worst, rel)
            count += 1
        report[name] = worst
    return GradCheckReport(report, tol, count)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float = 40.0) -> Dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """In-place Adam update of every parameter that has a gradient in ``grads``."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
