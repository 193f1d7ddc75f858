"""A small reverse-mode autodiff engine over float64 NumPy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
:func:`backward` on a scalar walks the graph once in reverse topological
order; intermediate gradients live in a scratch table, and only leaves with
``requires_grad`` accumulate into ``.grad``. So calling ``backward`` twice
without :func:`zero_grad` adds the two gradients, and a leaf the loss does
not depend on keeps an all-zero gradient.
"""

from contextlib import contextmanager

import numpy as np

from mcam import kernels
from mcam.errors import ConfigurationError, ContractError, DimensionError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no graph inside the block; results are constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        # leaves own a gradient buffer from the start, so unreachable ones read as zero
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward, op):
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def scale(x, c):
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def reciprocal(x):
    out = 1.0 / x.data
    return _make(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def sqrt(x):
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def elu(x):
    pos = x.data > 0
    em1 = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, em1)
    return _make(out, (x,), lambda g: (g * np.where(pos, 1.0, em1 + 1.0),), "elu")


def tabs(x):
    """Absolute value; subgradient 0 at 0."""
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, idx):
    out = x.data[idx]
    if isinstance(out, np.ndarray) and np.shares_memory(out, x.data):
        out = out.copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.asarray(out, dtype=np.float64), (x,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def amax(x, axis, keepdims=False):
    """Maximum along ``axis``; ties share the gradient evenly."""
    m = x.data.max(axis=axis, keepdims=True)
    mask = (x.data == m).astype(np.float64)
    mask /= mask.sum(axis=axis, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * g,)

    return _make(out, (x,), backward, "amax")


def l2norm(x, axis, keepdims=False):
    """Euclidean norm along ``axis`` with gradient 0 at the origin."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(n > 0, x.data / safe, 0.0) * g,)

    return _make(out, (x,), backward, "l2norm")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product with NumPy batching; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def _softmax(v):
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ConfigurationError("softmax over an empty axis")
    s = _softmax(x.data)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _make(np.array(loss), (logits,), backward, "softmax_xent")


# ---------------------------------------------------------------- convolution & pooling


def _resolve_padding(padding, kh, kw):
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        # the extra element of an even kernel goes after
        return ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)
    (pt, pb), (pl, pr) = padding
    return (int(pt), int(pb)), (int(pl), int(pr))


def conv2d(x, w, groups=1, padding="valid"):
    """Grouped 2-D cross-correlation, stride 1, no bias.

    ``x`` is (batch, channels, h, w); ``w`` is (out, channels/groups, kh, kw).
    ``groups == channels`` gives a depthwise convolution. ``padding`` is
    "valid", "same" or ``((top, bottom), (left, right))``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, CPG, KH, KW = w.shape
    if groups < 1 or C % groups or O % groups:
        raise ConfigurationError(f"{C} input / {O} output channels not divisible by groups={groups}")
    if CPG * groups != C:
        raise DimensionError(f"kernel {w.shape} expects {CPG * groups} input channels, got {C}")
    (pt, pb), (pl, pr) = _resolve_padding(padding, KH, KW)
    HP, WP = H + pt + pb, W + pl + pr
    if KH > HP or KW > WP:
        raise DimensionError(f"kernel {w.shape} larger than padded input ({HP}, {WP})")
    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    xp = np.ascontiguousarray(xp)
    wd = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xp, wd, groups)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv2d_grad_input(g, wd, groups, HP, WP)[:, :, pt:pt + H, pl:pl + W]
        if w.requires_grad:
            gw = kernels.conv2d_grad_weight(g, xp, groups, KH, KW)
        return gx, gw

    return _make(np.asarray(out), (x, w), backward, "conv2d")


def avg_pool2d(x, size):
    """Non-overlapping average pooling over the last two axes; extents must divide."""
    ph, pw = size
    B, C, H, W = x.shape
    if H % ph or W % pw:
        raise DimensionError(f"pool {size} does not tile input {x.shape}")
    out = x.data.reshape(B, C, H // ph, ph, W // pw, pw).mean(axis=(3, 5))

    def backward(g):
        g = g / (ph * pw)
        return (np.repeat(np.repeat(g, ph, axis=2), pw, axis=3),)

    return _make(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------- normalisation & regularisation


def batchnorm(x, gamma, beta, running_mean, running_var, train, momentum=0.9, eps=1e-5):
    """Batch normalisation over axis 1 with statistics over every other axis.

    In train mode the batch mean and biased variance are used and the running
    buffers (NumPy arrays) are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``. In eval mode the
    running buffers are used and left untouched.
    """
    B, C = x.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm parameters {gamma.shape}/{beta.shape} for {C} channels")
    x3 = np.ascontiguousarray(x.data.reshape(B, C, -1))
    if train:
        y, xhat, mu, var = kernels.batchnorm_forward(x3, np.ascontiguousarray(gamma.data),
                                                     np.ascontiguousarray(beta.data), eps)
        update_running(running_mean, running_var, mu, var, momentum)

        def backward(g):
            dx, dg, db = kernels.batchnorm_backward(
                np.ascontiguousarray(g.reshape(B, C, -1)), xhat, gamma.data, var, eps)
            return dx.reshape(x.shape), dg, db
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x3 - running_mean[None, :, None]) * inv[None, :, None]
        y = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

        def backward(g):
            g3 = g.reshape(B, C, -1)
            dx = g3 * (gamma.data * inv)[None, :, None]
            return dx.reshape(x.shape), (g3 * xhat).sum(axis=(0, 2)), g3.sum(axis=(0, 2))

    return _make(np.asarray(y).reshape(x.shape), (x, gamma, beta), backward, "batchnorm")


def update_running(running_mean, running_var, mu, var, momentum):
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu
    running_var *= momentum
    running_var += (1.0 - momentum) * var


def dropout(x, rate, train, rng=None):
    """Inverted dropout: identity in eval mode, scaled by 1/keep in train mode."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate {rate} outside [0, 1)")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- graph traversal


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return None


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


def grad_check(forward, params, eps=1e-5):
    """Largest relative gap between analytic and central-difference gradients.

    ``forward`` is a zero-argument callable returning a scalar Tensor that
    depends on ``params``; it must be deterministic. The gap per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ConfigurationError(f"eps={eps} outside (0, 1e-2]")
    with no_grad():
        f0 = forward().data.copy()
        if not np.array_equal(f0, forward().data):
            raise ContractError("forward is not deterministic (disable dropout)")
    zero_grad(params)
    backward(forward())
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = forward().item()
                flat[i] = orig - eps
                fm = forward().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
