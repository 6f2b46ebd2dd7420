"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive registers an analytic backward rule on an implicit tape
(the graph of parent links). Calling backward() on a scalar replays the
tape and accumulates gradients into the requires_grad leaves.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np


class AutodiffError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (e.g. teacher forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-dimensional float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; every op lives at module level.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss; grads accumulate additively."""
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward is None and not loss._parents:
        raise AutodiffError("loss is not connected to a gradient tape")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            cur = grads.get(id(parent))
            # never += in place: pg may alias a buffer shared with siblings
            grads[id(parent)] = pg if cur is None else cur + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return _make(data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        return ((a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    return _make(data, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        return ((a, g * data),)

    return _make(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        return ((a, g / a.data),)

    return _make(data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bwd(g):
        return ((a, g * 0.5 / data),)

    return _make(data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        return ((a, g * (a.data > 0.0)),)

    return _make(data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; exact analytic gradient of the approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t * t) * dinner
        return ((a, g * (0.5 * (1.0 + t) + 0.5 * x * dt)),)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape).copy()),)

    return _make(data, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g / count, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / count, a.shape).copy()),)

    return _make(data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        return ((a, g.reshape(a.shape)),)

    return _make(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return ((a, g.transpose(inv)),)

    return _make(data, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        outs = []
        off = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + n)
            outs.append((t, g[tuple(sl)]))
            off += n
        return tuple(outs)

    return _make(data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul requires tensors of rank >= 1")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul contraction mismatch: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _make(data, (a, b), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2D convolution on NCHW inputs, weight (C_out, C_in/groups, kh, kw).

    Direct kernel-offset loops; adequate for small kernels and images.
    """
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d channels not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d weight expects {cin // groups} input channels/group, got {cin_g}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cout_g = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for gi in range(groups):
        xg = xp[:, gi * cin_g:(gi + 1) * cin_g]
        wg = w.data[gi * cout_g:(gi + 1) * cout_g]
        og = out[:, gi * cout_g:(gi + 1) * cout_g]
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                og += np.einsum("nchw,oc->nohw", xs, wg[:, :, i, j], optimize=True)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},)")
        out += b.data[None, :, None, None]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for gi in range(groups):
            xg = xp[:, gi * cin_g:(gi + 1) * cin_g]
            wg = w.data[gi * cout_g:(gi + 1) * cout_g]
            gg = g[:, gi * cout_g:(gi + 1) * cout_g]
            gxg = gxp[:, gi * cin_g:(gi + 1) * cin_g]
            for i in range(kh):
                for j in range(kw):
                    xs = xg[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                    gw[gi * cout_g:(gi + 1) * cout_g, :, i, j] += np.einsum(
                        "nohw,nchw->oc", gg, xs, optimize=True)
                    gxg[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                        "nohw,oc->nchw", gg, wg[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [(x, gx), (w, gw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {size}")
    ho, wo = h // size, w // size
    view = x.data.reshape(n, c, ho, size, wo, size)
    data = view.mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        return ((x, gx),)

    return _make(data, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()
        return ((x, gx),)

    return _make(data, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization and probability ops

def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((x, (g - dot) * data / temperature),)

    return _make(data, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    sm = np.exp(data)

    def bwd(g):
        return ((x, g - sm * g.sum(axis=axis, keepdims=True)),)

    return _make(data, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable scale/shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    data = xh * gamma.data + beta.data
    d = x.shape[-1]

    def bwd(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xh * (gg * xh).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        return ((x, gx),
                (gamma, (g * xh).sum(axis=reduce_axes)),
                (beta, g.sum(axis=reduce_axes)))

    _ = d
    return _make(data, (x, gamma, beta), bwd)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, channel_axis: int,
                 eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization over the remaining axes.

    Channels never mix, so zeroed channels stay zero when scale/shift are
    zeroed too; this keeps masked and compacted forwards identical.
    """
    ax = channel_axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i not in (0, ax))
    if not red:
        raise ShapeError("channel_norm needs at least one non-batch, non-channel axis")
    mu = x.data.mean(axis=red, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)
    data = xh * gam + bet
    m = int(np.prod([x.shape[i] for i in red]))

    def bwd(g):
        gg = g * gam
        gx = inv * (gg - gg.mean(axis=red, keepdims=True)
                    - xh * (gg * xh).mean(axis=red, keepdims=True))
        other = tuple(i for i in range(x.ndim) if i != ax)
        return ((x, gx),
                (gamma, (g * xh).sum(axis=other)),
                (beta, g.sum(axis=other)))

    _ = m
    return _make(data, (x, gamma, beta), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, class_axis: int = -1) -> Tensor:
    """Mean negative log-likelihood; targets are integer class indices.

    For dense predictions pass (N, K, H, W) logits with class_axis=1 and
    (N, H, W) targets.
    """
    ax = class_axis % logits.ndim
    targets = np.asarray(targets)
    expect = logits.shape[:ax] + logits.shape[ax + 1:]
    if targets.shape != expect:
        raise ShapeError(f"cross_entropy targets shape {targets.shape}, expected {expect}")
    z = logits.data - logits.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    logp = z - lse
    idx = np.expand_dims(targets.astype(np.int64), ax)
    picked = np.take_along_axis(logp, idx, axis=ax)
    data = -picked.mean()
    count = picked.size

    def bwd(g):
        sm = np.exp(logp)
        onehot = np.zeros_like(sm)
        np.put_along_axis(onehot, idx, 1.0, axis=ax)
        return ((logits, g * (sm - onehot) / count),)

    return _make(np.asarray(data), (logits,), bwd)


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1) -> Tensor:
    """Mean KL(p || q) between probability distributions along `axis`."""
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    ratio = np.log(p.data) - np.log(q.data)
    per = (p.data * ratio).sum(axis=axis)
    data = per.mean() if per.ndim else per
    count = per.size

    def bwd(g):
        gp = g * (ratio + 1.0) / count
        gq = -g * (p.data / q.data) / count
        return ((p, gp), (q, gq))

    return _make(np.asarray(data), (p, q), bwd)
