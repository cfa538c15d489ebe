"""Dense float64 tensors with reverse-mode gradients.

Everything here is deliberately small: 2-D (occasionally 1-D / scalar)
arrays, the handful of ops the attention equations need, and a central
finite-difference oracle used to validate every analytic backward pass.
Compute is always float64; float32 appears only at file boundaries.
"""

import numpy as np


class Tensor:
    """An ndarray plus the bookkeeping needed for backprop.

    Non-finite values are rejected at construction, so any NaN/Inf produced
    by an op surfaces immediately instead of propagating.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def backward(self, upstream=None):
        """Accumulate d(self)/d(leaf) into .grad of every grad-requiring leaf.

        `upstream` defaults to ones (i.e. self must be scalar-like for the
        result to mean a gradient). Repeated calls keep accumulating into
        leaf grads; set them to None to reset.
        """
        if upstream is None:
            upstream = np.ones_like(self.data)
        g0 = np.asarray(upstream, dtype=np.float64)
        if g0.shape != self.data.shape:
            raise ValueError("upstream gradient shape mismatch")

        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): g0}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is not None:
                t._backward(g, grads)
            elif t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _acc(grads, t, g):
    if not t.requires_grad:
        return
    k = id(t)
    grads[k] = grads[k] + g if k in grads else g


def _make(out, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(out, requires_grad=req,
                  _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a, b):
    """Matrix product a[R,S] @ b[S,C]. Raises on inner-dim mismatch."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g, grads):
        _acc(grads, a, g @ b.data.T)
        _acc(grads, b, a.data.T @ g)

    return _make(out, (a, b), backward)


def add(a, b):
    out = a.data + b.data

    def backward(g, grads):
        _acc(grads, a, _unbroadcast(g, a.data.shape))
        _acc(grads, b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b):
    out = a.data - b.data

    def backward(g, grads):
        _acc(grads, a, _unbroadcast(g, a.data.shape))
        _acc(grads, b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b):
    out = a.data * b.data

    def backward(g, grads):
        _acc(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _acc(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def scale(a, c):
    c = float(c)
    out = a.data * c

    def backward(g, grads):
        _acc(grads, a, g * c)

    return _make(out, (a,), backward)


def add_scalar(a, c):
    c = float(c)
    out = a.data + c

    def backward(g, grads):
        _acc(grads, a, g)

    return _make(out, (a,), backward)


def neg(a):
    return scale(a, -1.0)


def transpose(a):
    out = np.ascontiguousarray(a.data.T)

    def backward(g, grads):
        _acc(grads, a, g.T)

    return _make(out, (a,), backward)


def relu(a):
    keep = a.data > 0.0
    out = np.where(keep, a.data, 0.0)

    def backward(g, grads):
        _acc(grads, a, g * keep)

    return _make(out, (a,), backward)


def sigmoid(a):
    z = a.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def backward(g, grads):
        _acc(grads, a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def concat_cols(tensors):
    """Column-wise concat of 2-D tensors with equal row counts."""
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g, grads):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _acc(grads, t, g[:, lo:hi])

    return _make(out, tuple(tensors), backward)


def mean_rows(a, n):
    """Mean of the first n rows, returned as a 1 x C matrix."""
    if not 1 <= n <= a.shape[0]:
        raise ValueError(f"row count {n} out of range for shape {a.shape}")
    out = a.data[:n].mean(axis=0, keepdims=True)

    def backward(g, grads):
        full = np.zeros_like(a.data)
        full[:n] = g / n
        _acc(grads, a, full)

    return _make(out, (a,), backward)


def row_sums(a):
    """Row sums of a 2-D tensor as a T x 1 column."""
    out = a.data.sum(axis=1, keepdims=True)

    def backward(g, grads):
        _acc(grads, a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out, (a,), backward)


def div(a, b):
    out = a.data / b.data

    def backward(g, grads):
        _acc(grads, a, _unbroadcast(g / b.data, a.data.shape))
        _acc(grads, b, _unbroadcast(-g * a.data / (b.data ** 2), b.data.shape))

    return _make(out, (a, b), backward)


def ssum(a):
    out = np.asarray(a.data.sum())

    def backward(g, grads):
        _acc(grads, a, np.broadcast_to(g, a.data.shape).astype(np.float64))

    return _make(out, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Row-wise layer normalization with learned per-feature gain/bias."""
    z = x.data
    mu = z.mean(axis=1, keepdims=True)
    xc = z - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g, grads):
        _acc(grads, gain, (g * xhat).sum(axis=0))
        _acc(grads, bias, g.sum(axis=0))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        _acc(grads, x, inv * (dxhat - m1 - xhat * m2))

    return _make(out, (x, gain, bias), backward)


def masked_row_softmax(logits, mask=None):
    """Row softmax of a T x T matrix, with optional keep-mask.

    Forbidden entries have their logits replaced by -inf before the softmax
    (never multiplied), so they come out exactly zero and contribute exactly
    zero gradient. A row with no kept entry is an error.
    """
    z = logits.data
    if z.ndim != 2:
        raise ValueError("masked_row_softmax expects a 2-D tensor")
    keep = getattr(mask, "keep", mask)
    if keep is None:
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
    else:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != z.shape:
            raise ValueError("mask shape does not match logits")
        if not keep.any(axis=1).all():
            raise ValueError("softmax row with every entry forbidden")
        zm = np.where(keep, z, -np.inf)
        m = zm.max(axis=1, keepdims=True)
        e = np.exp(zm - m)
    a = e / e.sum(axis=1, keepdims=True)

    def backward(g, grads):
        _acc(grads, logits, a * (g - (g * a).sum(axis=1, keepdims=True)))

    return _make(a, (logits,), backward)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy over all entries, stable log-sum-exp form."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError("targets shape does not match logits")
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(loss.mean())

    def backward(g, grads):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                     np.exp(z) / (1.0 + np.exp(z)))
        _acc(grads, logits, g * (s - y) / z.size)

    return _make(out, (logits,), backward)


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function of one tensor.

    Independent of the analytic backward passes above; used as the oracle
    they are checked against.
    """

    def evaluate(arr):
        v = f(Tensor(arr))
        v = float(v.data) if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise ValueError("non-finite function value in finite_diff_grad")
        return v

    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    g = np.empty_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate(base)
        flat[i] = orig - eps
        fm = evaluate(base)
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return Tensor(g)
