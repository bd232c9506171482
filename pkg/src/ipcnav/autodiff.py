"""A small tape-based reverse-mode differentiation engine on numpy arrays.

Every op returns a new `Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. `backward` walks the graph in
reverse topological order. Loss functions are fused ops with hand-written
gradients so that large per-cell reductions stay cheap.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand so float32 graphs stay float32
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.value.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.value.dtype))
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every leaf with requires_grad."""
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


# --- elementwise and structural ops --------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Tensor:
    """(..., n) @ (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def fn(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(av @ bv, (a, b), fn)


def linear(x, w, b) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xv, wv = x.value, w.value

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv.T, xv.reshape(-1, xv.shape[-1]).T @ g2, g2.sum(axis=0)

    return _node(xv @ wv + b.value, (x, w, b), fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _node(y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.value)
    return _node(y, (x,), lambda g: (g * y * (1 - y),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.value.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is Ellipsis for i in parts)

    def fn(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], (x,), fn)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.value for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _node(np.stack([x.value for x in xs], axis=axis), xs, fn)


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _node(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, shape).astype(x.value.dtype),))


# --- convolutions with kernel == stride ------------------------------------


def patch_conv(x, w, b, k: int) -> Tensor:
    """Non-overlapping k x k convolution, channels-last.

    x: (N, H, W, C), w: (k*k*C, Cout), b: (Cout,) -> (N, H/k, W/k, Cout).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    n, h, wd, c = x.shape
    ho, wo = h // k, wd // k
    patches = x.value.reshape(n, ho, k, wo, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, ho, wo, k * k * c)
    wv = w.value

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gp = (g @ wv.T).reshape(n, ho, wo, k, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, wd, c)
        gw = patches.reshape(-1, k * k * c).T @ g2
        return gp, gw, g2.sum(axis=0)

    return _node(patches @ wv + b.value, (x, w, b), fn)


def patch_deconv(x, w, b, k: int) -> Tensor:
    """Transpose of `patch_conv`: each input cell expands to a k x k block.

    x: (N, H, W, C), w: (C, k*k*Cout), b: (Cout,) -> (N, H*k, W*k, Cout).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    n, h, wd, c = x.shape
    cout = b.shape[0]
    xv, wv = x.value, w.value
    y = (xv @ wv).reshape(n, h, wd, k, k, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * k, wd * k, cout)

    def fn(g):
        gb = g.reshape(-1, cout).sum(axis=0)
        gblk = g.reshape(n, h, k, wd, k, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, wd, k * k * cout)
        gx = gblk @ wv.T
        gw = xv.reshape(-1, c).T @ gblk.reshape(-1, k * k * cout)
        return gx, gw, gb

    return _node(y + b.value, (x, w, b), fn)


# --- fused losses (each returns a scalar weighted sum) -----------------------

PROB_CLAMP = 1e-7


def softmax_cross_entropy(logits, targets: np.ndarray, weights) -> Tensor:
    """sum_i w_i * -log(max(softmax(logits_i)[t_i], 1e-7)) over the leading axes.

    `weights` is a scalar or one weight per row. The class axis is short, so
    reductions over it are unrolled column by column (much faster in numpy).
    """
    logits = as_tensor(logits)
    z = logits.value
    c = z.shape[-1]
    z2 = z.reshape(-1, c)
    n = z2.shape[0]
    flat = np.arange(n) * c + np.asarray(targets).reshape(-1).astype(np.int64)
    w = np.asarray(weights, dtype=z.dtype)
    cols = [z2[:, j] for j in range(c)]
    zmax = cols[0]
    for col in cols[1:]:
        zmax = np.maximum(zmax, col)
    e = np.exp(z2 - zmax[:, None])
    s = e[:, 0].copy()
    for j in range(1, c):
        s += e[:, j]
    zt = z2.reshape(-1)[flat]
    nll = np.log(s) + zmax - zt
    cap = np.float32(-np.log(PROB_CLAMP)).astype(z.dtype)
    clamped = nll > cap
    nll = np.minimum(nll, cap)
    val = np.asarray((nll * w).sum() if w.ndim else nll.sum() * w, dtype=z.dtype)

    def fn(g):
        d = e / s[:, None]
        d.reshape(-1)[flat] -= 1.0
        scale = w * ~clamped if (w.ndim or clamped.any()) else w
        if np.ndim(scale):
            d *= scale[:, None]
        else:
            d *= scale
        return ((g * d).reshape(z.shape),)

    return _node(val, (logits,), fn)


def deconv_softmax_ce(x, w, b, k: int, block_targets: np.ndarray, weight: float) -> Tensor:
    """`patch_deconv` followed by `softmax_cross_entropy`, fused.

    Targets come in block layout (M, k*k) where M = N*H*W indexes input cells
    and the second axis is ky*k + kx. Working per class on contiguous arrays
    avoids materializing the channels-last logits. Returns weight * sum of
    clamped per-cell negative log-likelihoods.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    cin = x.shape[-1]
    cout = b.shape[0]
    x2 = x.value.reshape(-1, cin)
    wv = w.value
    dtype = x2.dtype
    wcs = [np.ascontiguousarray(wv[:, c::cout]) for c in range(cout)]
    ys = [x2 @ wcs[c] + b.value[c] for c in range(cout)]
    t = np.asarray(block_targets).reshape(ys[0].shape)
    zmax = ys[0]
    for y in ys[1:]:
        zmax = np.maximum(zmax, y)
    es = [np.exp(y - zmax) for y in ys]
    s = es[0].copy()
    for e in es[1:]:
        s += e
    zt = np.zeros_like(zmax)
    for c in range(cout):
        zt += np.where(t == c, ys[c], 0)
    nll = np.log(s) + zmax - zt
    cap = np.asarray(-np.log(PROB_CLAMP), dtype=dtype)
    live = nll <= cap
    val = np.asarray(np.minimum(nll, cap).sum() * weight, dtype=dtype)

    def fn(g):
        scale = (g * weight) * live / s
        gx = np.zeros_like(x2)
        gw = np.zeros_like(wv)
        gb = np.zeros_like(b.value)
        for c in range(cout):
            dy = es[c] * scale
            dy -= (t == c) * (g * weight) * live
            gw[:, c::cout] = x2.T @ dy
            gb[c] = dy.sum()
            gx += dy @ wcs[c].T
        return gx.reshape(x.shape), gw, gb

    return _node(val, (x, w, b), fn)


def sigmoid_focal(logits, targets: np.ndarray, weights: np.ndarray, alpha: float, gamma: float) -> Tensor:
    logits = as_tensor(logits)
    x = logits.value
    t = np.asarray(targets, dtype=x.dtype)
    w = np.asarray(weights, dtype=x.dtype)
    raw = _sigmoid(x)
    p = np.clip(raw, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (raw > PROB_CLAMP) & (raw < 1 - PROB_CLAMP)
    lp, l1p = np.log(p), np.log1p(-p)
    loss = t * (-alpha * (1 - p) ** gamma * lp) + (1 - t) * (-(1 - alpha) * p**gamma * l1p)
    val = np.asarray((w * loss).sum(), dtype=x.dtype)

    def fn(g):
        dpos = alpha * (1 - p) ** gamma * (gamma * p * lp - (1 - p))
        dneg = -(1 - alpha) * p**gamma * (gamma * (1 - p) * l1p - p)
        d = (t * dpos + (1 - t) * dneg) * w * inside
        return (g * d,)

    return _node(val, (logits,), fn)


def bce_with_logits(logits, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    logits = as_tensor(logits)
    x = logits.value
    t = np.asarray(targets, dtype=x.dtype)
    w = np.asarray(weights, dtype=x.dtype)
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    val = np.asarray((w * loss).sum(), dtype=x.dtype)
    return _node(val, (logits,), lambda g: (g * w * (_sigmoid(x) - t),))


def smooth_l1(pred, target: np.ndarray, weights: np.ndarray, beta: float = 1.0) -> Tensor:
    pred = as_tensor(pred)
    d = pred.value - np.asarray(target, dtype=pred.value.dtype)
    w = np.asarray(weights, dtype=pred.value.dtype)
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    val = np.asarray((w * loss).sum(), dtype=pred.value.dtype)
    return _node(val, (pred,), lambda g: (g * w * np.where(small, d / beta, np.sign(d)),))


def squared_error(pred, target: np.ndarray, weights: np.ndarray) -> Tensor:
    pred = as_tensor(pred)
    d = pred.value - np.asarray(target, dtype=pred.value.dtype)
    w = np.asarray(weights, dtype=pred.value.dtype)
    val = np.asarray((w * d * d).sum(), dtype=pred.value.dtype)
    return _node(val, (pred,), lambda g: (g * 2 * w * d,))
