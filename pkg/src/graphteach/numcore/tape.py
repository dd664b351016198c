"""Reverse-mode differentiation over float64 2-D arrays.

Ops build an implicit DAG of Node objects; backward(root) walks it once in
reverse topological order and accumulates vector-Jacobian products into
.grad. Subgraphs whose inputs all have requires_grad=False are not recorded,
so frozen-feature branches cost nothing extra.

Gradient arrays are never mutated in place; accumulation always allocates,
which keeps aliasing between pass-through gradients harmless.
"""

import numpy as np

from .. import _accel
from ..errors import ContractError, DimensionError, NormalizationError
from . import kernels


class Node:
    __slots__ = ("value", "grad", "parents", "bwd", "requires_grad")

    def __init__(self, value, parents=None, bwd=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad or parents is not None

    @property
    def shape(self):
        return self.value.shape


class Param(Node):
    """Trainable leaf; AdamW state is keyed on object identity."""

    def __init__(self, value, name=""):
        super().__init__(np.ascontiguousarray(value, dtype=np.float64),
                         requires_grad=True)
        self.name = name

    __slots__ = ("name",)


def constant(x):
    return Node(np.ascontiguousarray(x, dtype=np.float64))


def _make(value, parents, bwd):
    if any(p.requires_grad for p in parents):
        return Node(value, parents, bwd)
    return Node(value)


def _acc(node, g):
    if node.requires_grad:
        node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(2) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def backward(root):
    """Populate .grad on every node reachable from the scalar root.

    Each recorded node's backward rule runs exactly once.
    """
    if root.value.shape != (1, 1):
        raise ContractError(f"backward root must be (1, 1), got {root.value.shape}")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.parents:
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    root.grad = np.ones((1, 1))
    for node in reversed(topo):
        if node.bwd is not None:
            node.bwd(node.grad)


def gradients(root, params):
    """backward(root), then gradients in param order (zeros when unreached)."""
    backward(root)
    return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    v = a.value + b.value

    def bwd(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return _make(v, (a, b), bwd)


def sub(a, b):
    v = a.value - b.value

    def bwd(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(-g, b.value.shape))

    return _make(v, (a, b), bwd)


def neg(a):
    def bwd(g):
        _acc(a, -g)

    return _make(-a.value, (a,), bwd)


def mul(a, b):
    v = a.value * b.value

    def bwd(g):
        _acc(a, _unbroadcast(g * b.value, a.value.shape))
        _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(v, (a, b), bwd)


def scale(a, c):
    c = float(c)

    def bwd(g):
        _acc(a, c * g)

    return _make(c * a.value, (a,), bwd)


def exp(a):
    v = np.exp(a.value)

    def bwd(g):
        _acc(a, g * v)

    return _make(v, (a,), bwd)


def log(a):
    def bwd(g):
        _acc(a, g / a.value)

    return _make(np.log(a.value), (a,), bwd)


def pow_const(a, p):
    p = float(p)
    if p == 0.0:
        return _make(np.ones_like(a.value), (a,), lambda g: _acc(a, np.zeros_like(a.value)))
    v = a.value ** p

    def bwd(g):
        _acc(a, g * p * a.value ** (p - 1.0))

    return _make(v, (a,), bwd)


def gelu(a):
    def bwd(g):
        _acc(a, g * kernels.gelu_grad(a.value))

    return _make(kernels.gelu(a.value), (a,), bwd)


def softplus(a):
    v = np.logaddexp(0.0, a.value)

    def bwd(g):
        _acc(a, g / (1.0 + np.exp(-a.value)))

    return _make(v, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a, b):
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dims differ ({a.value.shape} x {b.value.shape})")
    v = a.value @ b.value

    def bwd(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return _make(v, (a, b), bwd)


def transpose(a):
    def bwd(g):
        _acc(a, np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(a.value.T), (a,), bwd)


def block_matmul(x, row_slices, weights):
    """Per-row-block matmul: out[lo:hi] = x[lo:hi] @ W_b for each block.

    The blocks must tile the rows of x in order; all weights share the same
    output width. One node replaces a slice/matmul/concat chain, which keeps
    per-edge graph layers cheap. Empty blocks are skipped.
    """
    if row_slices[0][0] != 0 or row_slices[-1][1] != x.value.shape[0] or any(
            a[1] != b[0] for a, b in zip(row_slices, row_slices[1:])):
        raise DimensionError(f"row slices {row_slices} do not tile the input")
    v = np.empty((x.value.shape[0], weights[0].value.shape[1]))
    for (lo, hi), w in zip(row_slices, weights):
        if hi > lo:
            v[lo:hi] = x.value[lo:hi] @ w.value

    def bwd(g):
        if x.requires_grad:
            gx = np.empty_like(x.value)
            for (lo, hi), w in zip(row_slices, weights):
                if hi > lo:
                    gx[lo:hi] = g[lo:hi] @ w.value.T
            _acc(x, gx)
        for (lo, hi), w in zip(row_slices, weights):
            if hi > lo and w.requires_grad:
                _acc(w, x.value[lo:hi].T @ g[lo:hi])

    return _make(v, (x, *weights), bwd)


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.int64)
    v = a.value[idx]

    def bwd(g):
        acc = np.zeros_like(a.value)
        _accel.scatter_add_rows(acc, idx, np.ascontiguousarray(g))
        _acc(a, acc)

    return _make(v, (a,), bwd)


def concat_rows(nodes):
    sizes = [n.value.shape[0] for n in nodes]
    v = np.concatenate([n.value for n in nodes], axis=0)

    def bwd(g):
        off = 0
        for n, s in zip(nodes, sizes):
            _acc(n, g[off:off + s])
            off += s

    return _make(v, tuple(nodes), bwd)


def slice_rows(a, i0, i1):
    v = a.value[i0:i1].copy()

    def bwd(g):
        acc = np.zeros_like(a.value)
        acc[i0:i1] = g
        _acc(a, acc)

    return _make(v, (a,), bwd)


def concat_cols(nodes):
    sizes = [n.value.shape[1] for n in nodes]
    v = np.concatenate([n.value for n in nodes], axis=1)

    def bwd(g):
        off = 0
        for n, s in zip(nodes, sizes):
            _acc(n, np.ascontiguousarray(g[:, off:off + s]))
            off += s

    return _make(v, tuple(nodes), bwd)


def slice_cols(a, j0, j1):
    v = np.ascontiguousarray(a.value[:, j0:j1])

    def bwd(g):
        acc = np.zeros_like(a.value)
        acc[:, j0:j1] = g
        _acc(a, acc)

    return _make(v, (a,), bwd)


def row_sum(a):
    v = a.value.sum(axis=1, keepdims=True)

    def bwd(g):
        _acc(a, np.broadcast_to(g, a.value.shape).copy())

    return _make(v, (a,), bwd)


def sum_all(a):
    v = np.array([[a.value.sum()]])

    def bwd(g):
        _acc(a, np.full_like(a.value, g[0, 0]))

    return _make(v, (a,), bwd)


def mean_all(a):
    size = a.value.size
    v = np.array([[a.value.sum() / size]])

    def bwd(g):
        _acc(a, np.full_like(a.value, g[0, 0] / size))

    return _make(v, (a,), bwd)


def rowwise_dot(a, b):
    v = (a.value * b.value).sum(axis=1, keepdims=True)

    def bwd(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    return _make(v, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization / attention


def softmax_rows(a, mask=None):
    y = kernels.softmax_rows(a.value, mask)

    def bwd(g):
        _acc(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _make(y, (a,), bwd)


def layer_norm(a, gamma, beta, eps=kernels.LN_EPS):
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    inv_s = 1.0 / np.sqrt(x.var(axis=1, keepdims=True) + eps)
    xhat = (x - mu) * inv_s
    v = gamma.value * xhat + beta.value

    def bwd(g):
        _acc(gamma, (g * xhat).sum(axis=0, keepdims=True))
        _acc(beta, g.sum(axis=0, keepdims=True))
        if a.requires_grad:
            dxhat = g * gamma.value
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            _acc(a, inv_s * (dxhat - m1 - xhat * m2))

    return _make(v, (a, gamma, beta), bwd)


def l2_normalize_rows(a):
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    if (norms <= kernels.NORM_EPS).any():
        raise NormalizationError("cannot normalize row with near-zero norm")
    y = a.value / norms

    def bwd(g):
        _acc(a, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms)

    return _make(y, (a,), bwd)


def segment_softmax(scores, seg, n):
    """Per-column softmax over rows of `scores` grouped by segment id."""
    seg = np.asarray(seg, dtype=np.int64)
    probs = _accel.segment_softmax(np.ascontiguousarray(scores.value), seg, n)

    def bwd(g):
        _acc(scores, _accel.segment_softmax_backward(
            probs, np.ascontiguousarray(g), seg, n))

    return _make(probs, (scores,), bwd)


def segment_sum(values, seg, n):
    seg = np.asarray(seg, dtype=np.int64)
    v = _accel.segment_sum(np.ascontiguousarray(values.value), seg, n)

    def bwd(g):
        _acc(values, g[seg])

    return _make(v, (values,), bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_logits(z, y):
    """-log softmax(z)[y] for a (1, C) logit row, via stable log-sum-exp."""
    zv = z.value
    if zv.shape[0] != 1:
        raise DimensionError("cross_entropy_logits expects a (1, C) row")
    y = int(y)
    if not 0 <= y < zv.shape[1]:
        raise ContractError(f"label {y} out of range for {zv.shape[1]} classes")
    m = zv.max()
    ex = np.exp(zv - m)
    lse = m + np.log(ex.sum())
    sm = ex / ex.sum()
    v = np.array([[lse - zv[0, y]]])

    def bwd(g):
        gz = g[0, 0] * sm.copy()
        gz[0, y] -= g[0, 0]
        _acc(z, gz)

    return _make(v, (z,), bwd)
