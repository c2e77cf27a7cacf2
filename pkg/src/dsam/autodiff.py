"""Reverse-mode automatic differentiation over dense real tensors.

Covers exactly the operations the acoustic model needs: matmul, broadcast
arithmetic, tanh/sigmoid/relu/exp, softmax, concat/split/stack, 1D
convolution with dilation and zero same-padding, a fused LSTM cell step,
embedding lookup, masked MSE/BCE/cross-entropy reductions and a
gradient-reversal op. Values are float64; tensors are immutable after
creation and safe to share read-only. A graph is implicit in the parent
links of its tensors; `backward` visits it in exact reverse topological
order.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

# probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log()
PROB_EPS = 1e-7


class AutodiffError(Exception):
    pass


class NonFiniteError(AutodiffError):
    """NaN or Inf encountered in a forward value or a backward gradient."""


class NondeterministicLossError(AutodiffError):
    """loss_fn returned different values on two identical evaluations."""


_node_counter = itertools.count()


def _all_finite(arr):
    # cheap first pass: a non-finite element drags the sum non-finite;
    # a non-finite sum of finite values (overflow) is checked exactly
    if math.isfinite(float(arr.sum())):
        return True
    return bool(np.isfinite(arr).all())


class Tensor:
    """A node in the computation graph.

    `data` is a float64 ndarray. `requires_grad` marks trainables and
    anything computed from them. Tensors reject non-finite values at
    creation, which is the forward-pass NaN error path.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None,
                 op="leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        self.node_id = next(_node_counter)
        if not _all_finite(arr):
            raise NonFiniteError(
                f"non-finite values in node {self.node_id} (op={op})")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, id={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction for inference paths."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _make(data, parents, backward, op):
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents),
                  _backward=backward, op=op)


def _accum(t, g):
    # never in place: g may be a view into a child's gradient buffer
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce gradient g of a broadcast result back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients reduced accordingly)

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, "mul")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise AutodiffError(f"matmul supports 1D/2D operands, got "
                            f"{a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ad, bd = a.data, b.data
        if a.ndim == 2 and b.ndim == 2:
            ga, gb = g @ bd.T, ad.T @ g
        elif a.ndim == 2 and b.ndim == 1:
            ga, gb = g[:, None] * bd, ad.T @ g
        elif a.ndim == 1 and b.ndim == 2:
            ga, gb = bd @ g, ad[:, None] * g
        else:
            ga, gb = g * bd, g * ad
        if a.requires_grad:
            _accum(a, ga)
        if b.requires_grad:
            _accum(b, gb)

    return _make(out_data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities

def tanh(x):
    y = np.tanh(x.data)

    def backward(g):
        _accum(x, g * (1.0 - y * y))

    return _make(y, (x,), backward, "tanh")


def _sigmoid_stable(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    y = _sigmoid_stable(x.data)

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _make(y, (x,), backward, "sigmoid")


def relu(x):
    y = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _make(y, (x,), backward, "relu")


def exp(x):
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(x.data)

    def backward(g):
        _accum(x, g * y)

    return _make(y, (x,), backward, "exp")


def softmax(x, axis):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# shape ops

def reshape(x, shape):
    y = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(y, (x,), backward, "reshape")


def transpose(x):
    if x.ndim != 2:
        raise AutodiffError("transpose expects a 2D tensor")
    y = x.data.T.copy()

    def backward(g):
        _accum(x, g.T)

    return _make(y, (x,), backward, "transpose")


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                _accum(p, g[tuple(idx)])
            offset += n

    return _make(y, tuple(parts), backward, "concat")


def split(x, sizes, axis=0):
    """Split along `axis` into pieces of the given sizes. Inverse of concat."""
    if sum(sizes) != x.shape[axis]:
        raise AutodiffError(
            f"split sizes {sizes} do not cover axis {axis} of {x.shape}")
    outs = []
    offset = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(offset, offset + n)
        idx = tuple(idx)
        piece = x.data[idx].copy()

        def backward(g, idx=idx):
            full = np.zeros(x.shape, dtype=DTYPE)
            full[idx] = g
            _accum(x, full)

        outs.append(_make(piece, (x,), backward, "split"))
        offset += n
    return outs


def stack(parts):
    """Stack equal-shape tensors along a new leading axis."""
    parts = list(parts)
    y = np.stack([p.data for p in parts], axis=0)

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                _accum(p, g[i])

    return _make(y, tuple(parts), backward, "stack")


def unstack(x):
    """Split a tensor along its leading axis, dropping that axis."""
    outs = []
    for i in range(x.shape[0]):
        piece = x.data[i].copy()

        def backward(g, i=i):
            full = np.zeros(x.shape, dtype=DTYPE)
            full[i] = g
            _accum(x, full)

        outs.append(_make(piece, (x,), backward, "unstack"))
    return outs


# ---------------------------------------------------------------------------
# lookup, convolution, recurrence

def embedding(table, ids):
    """Gather rows of `table` (V, E) at integer positions `ids` (L,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise AutodiffError("embedding ids must be 1D")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise AutodiffError(
            f"embedding id out of range for table with {table.shape[0]} rows")
    y = table.data[ids].copy()

    def backward(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make(y, (table,), backward, "embedding")


def conv1d(x, w, b=None, dilation=1):
    """1D convolution over the trailing axis with zero same-padding.

    x: (C_in, L), w: (C_out, C_in, k), b: (C_out,) or None.
    Output has shape (C_out, L) for any kernel width and dilation.
    """
    c_in, length = x.shape
    c_out, c_in2, k = w.shape
    if c_in2 != c_in:
        raise AutodiffError(f"conv1d channel mismatch: {x.shape} vs {w.shape}")
    if k == 1:
        # pointwise: plain matmul, no padding or patch matrix needed
        w2 = w.data.reshape(c_out, c_in)
        y = w2 @ x.data
        if b is not None:
            y += b.data[:, None]
        parents = (x, w) if b is None else (x, w, b)

        def backward(g):
            if w.requires_grad:
                _accum(w, (g @ x.data.T).reshape(c_out, c_in, 1))
            if x.requires_grad:
                _accum(x, w2.T @ g)
            if b is not None and b.requires_grad:
                _accum(b, g.sum(axis=1))

        return _make(y, parents, backward, "conv1d")

    pad = dilation * (k - 1)
    left = pad // 2
    xp = np.pad(x.data, ((0, 0), (left, pad - left)))
    # patch matrix: row block j holds the taps at kernel offset j
    cols = np.empty((k * c_in, length), dtype=DTYPE)
    for j in range(k):
        cols[j * c_in:(j + 1) * c_in] = xp[:, j * dilation:j * dilation + length]
    w2 = w.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    y = w2 @ cols
    if b is not None:
        y += b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            gw2 = g @ cols.T
            _accum(w, gw2.reshape(c_out, k, c_in).transpose(0, 2, 1))
        if x.requires_grad:
            gcols = w2.T @ g
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j * dilation:j * dilation + length] += \
                    gcols[j * c_in:(j + 1) * c_in]
            _accum(x, gxp[:, left:left + length])
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=1))

    return _make(y, parents, backward, "conv1d")


def lstm_cell(x, h, c, w, b):
    """One LSTM step. Returns the concatenation [h', c'] of length 2H.

    w has shape (4H, I+H) with gate order input, forget, cell, output;
    b has shape (4H,). Callers split the result into h' and c'.
    """
    hidden = h.shape[0]
    xh = np.concatenate([x.data, h.data])
    z = w.data @ xh + b.data
    zi, zf, zg, zo = (z[:hidden], z[hidden:2 * hidden],
                      z[2 * hidden:3 * hidden], z[3 * hidden:])
    gi = _sigmoid_stable(zi)
    gf = _sigmoid_stable(zf)
    gg = np.tanh(zg)
    go = _sigmoid_stable(zo)
    c2 = gf * c.data + gi * gg
    tc2 = np.tanh(c2)
    h2 = go * tc2
    out = np.concatenate([h2, c2])

    def backward(g):
        gh = g[:hidden]
        gc_direct = g[hidden:]
        dgo = gh * tc2
        dc2 = gh * go * (1.0 - tc2 * tc2) + gc_direct
        dgf = dc2 * c.data
        dc = dc2 * gf
        dgi = dc2 * gg
        dgg = dc2 * gi
        dz = np.concatenate([dgi * gi * (1.0 - gi),
                             dgf * gf * (1.0 - gf),
                             dgg * (1.0 - gg * gg),
                             dgo * go * (1.0 - go)])
        if w.requires_grad:
            _accum(w, dz[:, None] * xh)
        if b.requires_grad:
            _accum(b, dz)
        dxh = w.data.T @ dz
        if x.requires_grad:
            _accum(x, dxh[:x.shape[0]])
        if h.requires_grad:
            _accum(h, dxh[x.shape[0]:])
        if c.requires_grad:
            _accum(c, dc)

    return _make(out, (x, h, c, w, b), backward, "lstm_cell")


def gradient_reverse(x, scale):
    """Identity in the forward pass; backward passes -scale * gradient."""
    if scale < 0:
        raise AutodiffError("gradient_reverse scale must be >= 0")

    def backward(g):
        _accum(x, -scale * g)

    return _make(x.data, (x,), backward, "gradient_reverse")


# ---------------------------------------------------------------------------
# reductions

def _prep_mask(mask, shape):
    if mask is None:
        return None, float(np.prod(shape)) if shape else 1.0
    m = np.broadcast_to(np.asarray(mask, dtype=DTYPE), shape)
    denom = float(m.sum())
    if denom == 0:
        raise AutodiffError("reduction over an empty mask")
    return m, denom


def mse(pred, target, mask=None, reduction="mean"):
    """Mean (or sum) of squared errors over unmasked elements."""
    t = np.asarray(target, dtype=DTYPE)
    m, denom = _prep_mask(mask, pred.shape)
    d = pred.data - t
    sq = d * d if m is None else d * d * m
    scale = 1.0 / denom if reduction == "mean" else 1.0
    val = sq.sum() * scale

    def backward(g):
        gd = 2.0 * d * (g * scale)
        if m is not None:
            gd = gd * m
        _accum(pred, gd)

    return _make(val, (pred,), backward, "mse")


def bce(prob, target, mask=None, reduction="mean"):
    """Binary cross-entropy on probabilities in (0, 1).

    Inputs are clamped to [PROB_EPS, 1-PROB_EPS] before the log; the
    gradient is zero where the clamp is active.
    """
    t = np.asarray(target, dtype=DTYPE)
    m, denom = _prep_mask(mask, prob.shape)
    p = np.clip(prob.data, PROB_EPS, 1.0 - PROB_EPS)
    el = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    if m is not None:
        el = el * m
    scale = 1.0 / denom if reduction == "mean" else 1.0
    val = el.sum() * scale

    def backward(g):
        inside = (prob.data > PROB_EPS) & (prob.data < 1.0 - PROB_EPS)
        gp = (p - t) / (p * (1.0 - p)) * (g * scale)
        gp = np.where(inside, gp, 0.0)
        if m is not None:
            gp = gp * m
        _accum(prob, gp)

    return _make(val, (prob,), backward, "bce")


def cross_entropy_logits(logits, ids, mask=None, reduction="mean"):
    """Cross-entropy of logits (S, L) against integer class ids.

    `ids` is a scalar id applied to every column or an (L,) array. Columns
    can be masked out with a binary (L,) mask.
    """
    s, length = logits.shape
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 0:
        ids = np.full(length, int(ids), dtype=np.int64)
    if ids.min() < 0 or ids.max() >= s:
        raise AutodiffError(f"class id out of range for {s} classes")
    if mask is None:
        m = None
        denom = float(length)
    else:
        m = np.asarray(mask, dtype=DTYPE)
        denom = float(m.sum())
        if denom == 0:
            raise AutodiffError("reduction over an empty mask")
    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=0))
    logp = shifted[ids, np.arange(length)] - logz
    el = -logp if m is None else -logp * m
    scale = 1.0 / denom if reduction == "mean" else 1.0
    val = el.sum() * scale

    def backward(g):
        p = np.exp(shifted - logz)
        p[ids, np.arange(length)] -= 1.0
        if m is not None:
            p = p * m
        _accum(logits, p * (g * scale))

    return _make(val, (logits,), backward, "cross_entropy_logits")


def total(x):
    """Sum of all elements, producing a scalar node."""
    val = x.data.sum()

    def backward(g):
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(val, (x,), backward, "sum")


def mean(x):
    return mul(total(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate .grad on every requires_grad ancestor of the scalar loss."""
    if loss.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is None:
            continue
        if not _all_finite(node.grad):
            raise NonFiniteError(
                f"non-finite gradient at node {node.node_id} (op={node.op})")
        if node._backward is not None:
            node._backward(node.grad)


def forward_backward(loss, trainables):
    """Run backward from `loss` and return a gradient per trainable.

    Returns a list of ndarrays aligned with `trainables`; trainables the
    loss does not depend on get zero gradients.
    """
    backward(loss)
    grads = []
    for t in trainables:
        grads.append(t.grad if t.grad is not None
                     else np.zeros(t.shape, dtype=DTYPE))
    return grads


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def finite_difference_check(loss_fn: Callable[[], Tensor],
                            params: Sequence[Tensor],
                            eps: float = 1e-5,
                            sample: int | None = None,
                            seed: int = 0) -> float:
    """Max relative error between autodiff and central-difference gradients.

    Perturbs each parameter element in place by +/- eps (all elements, or
    `sample` per tensor chosen deterministically from `seed`) and compares
    (f(x+eps) - f(x-eps)) / 2eps to the autodiff gradient using
    |a - f| / max(|a|, |f|, 1e-8). Evaluates loss_fn twice up front and
    raises if the two values differ, since the check is meaningless for a
    nondeterministic loss. Useless at kinks (|x| near 0): both sides of a
    nondifferentiable point produce a large reported error by design.
    """
    if eps <= 0:
        raise AutodiffError("eps must be positive")
    first = loss_fn()
    second = loss_fn()
    if not np.array_equal(first.data, second.data):
        raise NondeterministicLossError(
            f"loss_fn returned {first.data} then {second.data}")
    zero_grads(params)
    grads = forward_backward(first, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        n = p.size
        if sample is not None and sample < n:
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = range(n)
        flat = p.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > worst:
                worst = rel
    zero_grads(params)
    return worst
