"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op accepts plain arrays or graph nodes.  With no node among the inputs the
op is evaluated eagerly and returns an ``ndarray``; otherwise the result is
recorded on the inputs' :class:`Graph` and a :class:`Node` is returned.  Each
record keeps its forward function, so a graph can be re-evaluated after a
parameter is perturbed (see :func:`grad_check`).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

# circular_convolve switches to the FFT route above this length
DIRECT_CONV_MAX = 64


class Node:
    __slots__ = ("graph", "id", "kind", "inputs", "value", "forward", "vjp", "name", "requires_grad")

    def __init__(self, graph, id, kind, inputs, value, forward, vjp, name, requires_grad):
        self.graph = graph
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.forward = forward
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.id} {self.kind}{label} shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


class Graph:
    """Ordered record of operations; node ids are positions in ``nodes``."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.grads: dict[int, np.ndarray] = {}

    def _add(self, kind, inputs, value, forward=None, vjp=None, name=None, requires_grad=False):
        node = Node(self, len(self.nodes), kind, tuple(inputs), value, forward, vjp, name, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        return self._add("const", (), np.asarray(value, dtype=np.float64), name=name)

    def param(self, value, name: str) -> Node:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        node = self._add("param", (), np.asarray(value, dtype=np.float64), name=name, requires_grad=True)
        self.params[name] = node
        return node

    def replay(self) -> None:
        """Recompute every derived node from the current leaf values."""
        nodes = self.nodes
        for node in nodes:
            if node.forward is not None:
                node.value = node.forward(*(nodes[i].value for i in node.inputs))

    def grad(self, ref) -> np.ndarray:
        node = self.params[ref] if isinstance(ref, str) else ref
        g = self.grads.get(node.id)
        return np.zeros_like(node.value) if g is None else g

    def param_grads(self) -> dict[str, np.ndarray]:
        return {name: self.grad(node) for name, node in self.params.items()}


def _value(x):
    return x.value if isinstance(x, Node) else x


def _apply(kind: str, forward: Callable, vjp: Callable, *inputs):
    graph = None
    for x in inputs:
        if isinstance(x, Node):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise ContractError("operands belong to different graphs")
    if graph is None:
        return forward(*(np.asarray(x, dtype=np.float64) for x in inputs))
    nodes = [x if isinstance(x, Node) else graph.constant(x) for x in inputs]
    value = forward(*(n.value for n in nodes))
    requires = any(n.requires_grad for n in nodes)
    return graph._add(kind, (n.id for n in nodes), value, forward, vjp, requires_grad=requires)


def backward(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients keyed by parameter name.

    Contributions are summed in descending node-id order, so repeated calls give
    bitwise-identical results.
    """
    if not isinstance(loss, Node) or loss.graph is not graph:
        raise ContractError("loss must be a node of this graph")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    nodes = graph.nodes
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node.vjp is None or not node.requires_grad:
            continue
        in_values = [nodes[i].value for i in node.inputs]
        in_grads = node.vjp(g, node.value, *in_values)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not nodes[i].requires_grad:
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    graph.grads = {nid: g for nid, g in grads.items() if nodes[nid].kind == "param"}
    return graph.param_grads()


def grad_check(graph: Graph, loss: Node, eps: float = 1e-5, details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    The error for one entry is ``|a - n| / max(1e-8, |a| + |n|)``.  With
    ``details=True`` a per-parameter dict of maxima is returned alongside.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    analytic = backward(graph, loss)
    per_param = {}
    for name, node in graph.params.items():
        node.value = node.value.copy()
        flat = node.value.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            graph.replay()
            f_plus = float(loss.value)
            flat[k] = orig - eps
            graph.replay()
            f_minus = float(loss.value)
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[name].reshape(-1)[k])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
        per_param[name] = worst
    graph.replay()
    overall = max(per_param.values(), default=0.0)
    return (overall, per_param) if details else overall


# ---------------------------------------------------------------------------
# elementwise and broadcasting arithmetic


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {np.shape(a)} and {np.shape(b)}") from None


def add(a, b):
    _check_broadcast(_value(a), _value(b), "add")
    return _apply(
        "add",
        np.add,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a,
        b,
    )


def sub(a, b):
    _check_broadcast(_value(a), _value(b), "sub")
    return _apply(
        "sub",
        np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        a,
        b,
    )


def mul(a, b):
    _check_broadcast(_value(a), _value(b), "mul")
    return _apply(
        "mul",
        np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        a,
        b,
    )


def neg(x):
    return _apply("neg", np.negative, lambda g, out, x: (-g,), x)


def tanh(x):
    return _apply("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),), x)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(x):
    return _apply("sigmoid", _sigmoid, lambda g, out, x: (g * out * (1.0 - out),), x)


def relu(x):
    return _apply("relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),), x)


def exp(x):
    return _apply("exp", np.exp, lambda g, out, x: (g * out,), x)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product with numpy batching rules; a 1-D operand is treated as a row or column vector."""
    sa, sb = np.shape(_value(a)), np.shape(_value(b))
    if len(sa) < 1 or len(sb) < 1 or sa[-1] != sb[-2 if len(sb) > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {sa} and {sb}")
    try:
        np.broadcast_shapes(sa[:-2], sb[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions disagree for shapes {sa} and {sb}") from None
    return _apply("matmul", np.matmul, _matmul_vjp, a, b)


def _matmul_vjp(g, out, a, b):
    # promote vectors to matrices, then undo the promotion on the way out
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a.ndim == 1 and b.ndim == 1:
        g2 = np.reshape(g, (1, 1))
    elif a.ndim == 1:
        g2 = g[..., None, :]
    elif b.ndim == 1:
        g2 = g[..., None]
    else:
        g2 = g
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
    gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
    return ga, gb


def einsum(subscripts: str, *operands):
    """Einstein summation with explicit output (``"ij,jk->ik"``); no repeated indices per operand."""
    if "->" not in subscripts:
        raise ContractError("einsum requires an explicit '->' output")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ContractError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    sizes = {}
    for sub_, op in zip(in_subs, operands):
        shape = np.shape(_value(op))
        if len(set(sub_)) != len(sub_) or len(sub_) != len(shape):
            raise DimensionError(f"einsum: subscript {sub_!r} does not fit shape {shape}")
        for c, n in zip(sub_, shape):
            if sizes.setdefault(c, n) != n:
                raise DimensionError(f"einsum: index {c!r} has sizes {sizes[c]} and {n}")

    def forward(*xs):
        return np.einsum(subscripts, *xs)

    def vjp(g, out, *xs):
        grads = []
        for i, target in enumerate(in_subs):
            others = [s for j, s in enumerate(in_subs) if j != i]
            available = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(c for c in target if c in available)
            spec = ",".join([out_sub] + others) + "->" + kept
            gi = np.einsum(spec, g, *(x for j, x in enumerate(xs) if j != i))
            if kept != target:
                shape = [sizes[c] if c in kept else 1 for c in target]
                gi = np.broadcast_to(gi.reshape(shape), xs[i].shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _apply("einsum", forward, vjp, *operands)


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum(x, axis=None, keepdims=False):
    def vjp(g, out, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp, x)


def mean(x, axis=None):
    n = np.size(_value(x)) if axis is None else np.shape(_value(x))[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def _softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    if np.shape(_value(x))[axis] == 0:
        raise DimensionError("softmax of an empty vector")

    def vjp(g, out, x):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _apply("softmax", lambda x: _softmax(x, axis), vjp, x)


def softmax_1d(x):
    if np.ndim(_value(x)) != 1 or np.size(_value(x)) == 0:
        raise DimensionError(f"softmax_1d expects a non-empty vector, got shape {np.shape(_value(x))}")
    return softmax(x)


def log_softmax(x, axis=-1):
    if np.shape(_value(x))[axis] == 0:
        raise DimensionError("log_softmax of an empty vector")

    def forward(x):
        z = x - np.max(x, axis=axis, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def vjp(g, out, x):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _apply("log_softmax", forward, vjp, x)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    shape = tuple(shape)
    return _apply("reshape", lambda x: x.reshape(shape), lambda g, out, x: (g.reshape(x.shape),), x)


def swapaxes(x, a1, a2):
    return _apply(
        "swapaxes",
        lambda x: np.swapaxes(x, a1, a2),
        lambda g, out, x: (np.swapaxes(g, a1, a2),),
        x,
    )


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(x, index):
    basic = _is_basic_index(index)

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _apply("getitem", lambda x: x[index], vjp, x)


def concat(xs: Sequence, axis=-1):
    xs = list(xs)
    shapes = [np.shape(_value(x)) for x in xs]
    nd = len(shapes[0])
    ax = axis % nd
    for s in shapes:
        if len(s) != nd or s[:ax] + s[ax + 1 :] != shapes[0][:ax] + shapes[0][ax + 1 :]:
            raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}")
    splits = np.cumsum([s[ax] for s in shapes])[:-1]

    def vjp(g, out, *parts):
        return tuple(np.split(g, splits, axis=ax))

    return _apply("concat", lambda *parts: np.concatenate(parts, axis=ax), vjp, *xs)


def stack(xs: Sequence, axis=0):
    xs = list(xs)
    shapes = {np.shape(_value(x)) for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")

    def vjp(g, out, *parts):
        return tuple(np.moveaxis(g, axis, 0))

    return _apply("stack", lambda *parts: np.stack(parts, axis=axis), vjp, *xs)


def take_rows(table, ids):
    """``table[ids]`` for an integer id array of any shape; gradient scatters back."""
    ids = np.asarray(ids, dtype=np.int64)
    n = np.shape(_value(table))[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)]
        raise IndexError(f"row id {int(bad[0])} out of range for table with {n} rows")

    def vjp(g, out, table):
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g)
        return (gt,)

    return _apply("take_rows", lambda table: table[ids], vjp, table)


# ---------------------------------------------------------------------------
# sketching primitives


def scatter_sum(x, index, signs, size):
    """``out[..., t] = sum over i with index[i] == t of signs[i] * x[..., i]``."""
    index = np.asarray(index, dtype=np.int64)
    signs = np.asarray(signs, dtype=np.float64)
    if np.shape(_value(x))[-1] != index.shape[0]:
        raise DimensionError(
            f"count sketch expects last dimension {index.shape[0]}, got shape {np.shape(_value(x))}"
        )

    def forward(x):
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1]) * signs
        rows = x2.shape[0]
        flat = (np.arange(rows)[:, None] * size + index[None, :]).ravel()
        out = np.bincount(flat, weights=x2.ravel(), minlength=rows * size)
        return out.reshape(lead + (size,))

    def vjp(g, out, x):
        return (g[..., index] * signs,)

    return _apply("count_sketch", forward, vjp, x)


def _conv_direct(u, v):
    n = u.shape[-1]
    t = np.arange(n)
    idx = (t[:, None] - t[None, :]) % n
    return np.einsum("...j,...tj->...t", u, v[..., idx])


def _corr_direct(g, v):
    # out[j] = sum_k g[(j + k) % n] * v[k]
    n = g.shape[-1]
    t = np.arange(n)
    idx = (t[:, None] + t[None, :]) % n
    return np.einsum("...jk,...k->...j", g[..., idx], v)


def _conv_fft(u, v):
    n = u.shape[-1]
    return np.fft.irfft(np.fft.rfft(u, axis=-1) * np.fft.rfft(v, axis=-1), n=n, axis=-1)


def _corr_fft(g, v):
    n = g.shape[-1]
    return np.fft.irfft(np.fft.rfft(g, axis=-1) * np.conj(np.fft.rfft(v, axis=-1)), n=n, axis=-1)


def circular_convolve(u, v, method: str = "auto"):
    """``out[t] = sum_j u[j] * v[(t - j) mod n]`` along the last axis.

    ``method`` is ``"direct"``, ``"fft"`` or ``"auto"`` (FFT for n > 64).
    """
    su, sv = np.shape(_value(u)), np.shape(_value(v))
    if not su or not sv or su[-1] != sv[-1]:
        raise DimensionError(f"circular_convolve: lengths differ for shapes {su} and {sv}")
    _check_broadcast(_value(u), _value(v), "circular_convolve")
    if method == "auto":
        method = "fft" if su[-1] > DIRECT_CONV_MAX else "direct"
    if method == "fft":
        conv, corr = _conv_fft, _corr_fft
    elif method == "direct":
        conv, corr = _conv_direct, _corr_direct
    else:
        raise ContractError(f"unknown convolution method {method!r}")

    def forward(u, v):
        u, v = np.broadcast_arrays(u, v)
        return conv(u, v)

    def vjp(g, out, u, v):
        ub, vb = np.broadcast_arrays(u, v)
        return _unbroadcast(corr(g, vb), u.shape), _unbroadcast(corr(g, ub), v.shape)

    return _apply("circular_convolve", forward, vjp, u, v)


def signed_sqrt(x, eps=1e-8):
    """``sign(x) * sqrt(|x| + eps)``; the offset keeps the derivative finite at 0."""
    return _apply(
        "signed_sqrt",
        lambda x: np.sign(x) * np.sqrt(np.abs(x) + eps),
        lambda g, out, x: (g * 0.5 / np.sqrt(np.abs(x) + eps),),
        x,
    )


def l2_normalize(x, eps=1e-12):
    """Scale the last axis to unit Euclidean norm."""

    def forward(x):
        return x / np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)

    def vjp(g, out, x):
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norm,)

    return _apply("l2_normalize", forward, vjp, x)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, gold):
    """Mean negative log-likelihood of integer targets under ``softmax(logits)``.

    ``logits`` is ``[K]`` with a scalar ``gold`` or ``[B, K]`` with ``gold`` of length B.
    """
    shape = np.shape(_value(logits))
    gold = np.asarray(gold, dtype=np.int64)
    k = shape[-1]
    if gold.size and (gold.min() < 0 or gold.max() >= k):
        raise ContractError(f"gold class out of range for {k} classes")
    logp = log_softmax(logits)
    if len(shape) == 1:
        if gold.ndim != 0:
            raise DimensionError("a single logit vector needs a scalar gold id")
        return neg(getitem(logp, int(gold)))
    if gold.shape != shape[:-1]:
        raise DimensionError(f"gold shape {gold.shape} does not match logits {shape}")
    picked = getitem(logp, (np.arange(shape[0]), gold))
    return neg(mean(picked))


__all__ = [
    "Graph",
    "Node",
    "add",
    "backward",
    "circular_convolve",
    "concat",
    "cross_entropy",
    "einsum",
    "exp",
    "getitem",
    "grad_check",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "scatter_sum",
    "sigmoid",
    "softmax",
    "softmax_1d",
    "stack",
    "sub",
    "sum",
    "swapaxes",
    "take_rows",
    "tanh",
]
