"""Minimal float64 tensor library with reverse-mode automatic differentiation.

Every operation records itself into a define-by-run graph: the output
tensor keeps references to its parents plus a closure that maps the
output gradient to parent gradients. ``Tensor.backward()`` walks that
graph once in reverse topological order, accumulates gradients into
``requires_grad`` leaves, and frees the graph as it goes (a graph is
single-shot; rebuild it by re-running the forward pass).

Everything is float64 and single-threaded per graph. Distinct graphs may
be used from distinct threads; there is no shared mutable state apart
from the fault-injection hook below.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import NumericsError, ShapeError

# Names of every op that participates in backward; the gradcheck suite is
# required to cover each one.
DIFFERENTIABLE_OPS = frozenset(
    {
        "add",
        "sub",
        "mul",
        "div",
        "neg",
        "abs",
        "gelu",
        "sum",
        "mean",
        "reshape",
        "transpose",
        "roll",
        "matmul",
        "softmax",
        "layer_norm",
        "conv2d",
        "avg_pool2d",
        "pixel_shuffle",
        "upsample_nearest",
    }
)

# Fault-injection hook used by the gradcheck fault tests: any op name in
# this set has its parent gradients negated during backward. Never set
# outside tests.
FAULT_NEGATE_OPS: set[str] = set()


class Tensor:
    """N-d float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    # -- basic introspection ------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar loss into all requires_grad leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is None:
                continue
            gout = node.grad
            if gout is None:
                continue
            grads = node._grad_fn(gout)
            if node._op in FAULT_NEGATE_OPS:
                grads = tuple(None if g is None else -g for g in grads)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            # free the graph: saved arrays live in the closures
            node._parents = ()
            node._grad_fn = None
            if node is not self:
                node.grad = None

    # -- operator sugar -----------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, grad_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._op = op
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over broadcast dimensions back to the operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    return _make(
        a.data / b.data,
        (a, b),
        "div",
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 (np.sign(0) == 0)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    phi = 0.5 * (1.0 + erf(x * inv_sqrt2))

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (phi + x * pdf),)

    return _make(x * phi, (a,), "gelu", grad_fn)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    keep_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(keep_shape), a.shape).copy(),)

    return _make(data, (a,), "sum", grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    keep_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(keep_shape), a.shape) / count,)

    return _make(data, (a,), "mean", grad_fn)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)
    return _make(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def roll(a: Tensor, shift, axis) -> Tensor:
    """Cyclic shift along the given axes; exactly invertible."""
    data = np.roll(a.data, shift, axis=axis)
    if isinstance(shift, int):
        inv_shift = -shift
    else:
        inv_shift = tuple(-s for s in shift)
    return _make(data, (a,), "roll", lambda g: (np.roll(g, inv_shift, axis=axis),))


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports plain 2-d x 2-d, stacked x stacked with identical leading
    dims, and stacked x 2-d (shared right operand, e.g. one projection
    applied to every window).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree for {a.shape} and {b.shape}")

    data = ad @ bd

    def grad_fn(g):
        da = g @ _swap_last(bd)
        if bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            n = bd.shape[-1]
            db = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = _swap_last(ad) @ g
        return (da, db)

    return _make(data, (a, b), "matmul", grad_fn)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- neural-net primitives ----------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericsError("softmax: input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), "softmax", grad_fn)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return _make(data, (a, gamma, beta), "layer_norm", grad_fn)


def conv2d(a: Tensor, w: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-d cross-correlation of a [Cin,H,W] input with a [Cout,Cin,kh,kw] kernel.

    Odd kernels only; default padding kh//2 keeps the spatial size at
    stride 1 (zero padding).
    """
    x, k = a.data, w.data
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"conv2d: need [Cin,H,W] input and [Cout,Cin,kh,kw] kernel, got {a.shape} and {w.shape}")
    cout, cin, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd-sized, got {kh}x{kw}")
    if cin != x.shape[0]:
        raise ShapeError(f"conv2d: kernel expects {cin} input channels, input has {x.shape[0]}")
    ph = kh // 2 if padding is None else int(padding)
    pw = kw // 2 if padding is None else int(padding)
    _, h, wd = x.shape
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {ph}")

    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))

    def _cols(arr):
        win = np.lib.stride_tricks.sliding_window_view(arr, (kh, kw), axis=(1, 2))
        win = win[:, ::stride, ::stride]
        return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)

    wmat = k.reshape(cout, cin * kh * kw)
    data = (_cols(padded) @ wmat.T).T.reshape(cout, ho, wo)

    def grad_fn(g):
        gmat = g.reshape(cout, ho * wo)
        cols = _cols(padded)  # recomputed to keep the graph light
        dw = (gmat @ cols).reshape(k.shape)
        dcols = (gmat.T @ wmat).reshape(ho, wo, cin, kh, kw)
        dpadded = np.zeros_like(padded)
        for dy in range(kh):
            for dx in range(kw):
                dpadded[:, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride] += (
                    dcols[:, :, :, dy, dx].transpose(2, 0, 1)
                )
        dxfull = dpadded[:, ph : ph + h, pw : pw + wd]
        return (dxfull, dw)

    return _make(data, (a, w), "conv2d", grad_fn)


def avg_pool2d(a: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k block means over the trailing two dimensions."""
    x = a.data
    h, w = x.shape[-2], x.shape[-1]
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: dims {h}x{w} not divisible by pool size {k}")
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, h // k, k, w // k, k)
    data = blocks.mean(axis=(-3, -1))

    def grad_fn(g):
        g = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        return (g / (k * k),)

    return _make(data, (a,), "avg_pool2d", grad_fn)


def pixel_shuffle(a: Tensor, r: int) -> Tensor:
    """Rearrange [C*r*r, H, W] into [C, r*H, r*W]."""
    x = a.data
    if x.ndim != 3:
        raise ShapeError(f"pixel_shuffle: need a 3-d [C*r^2,H,W] input, got {a.shape}")
    crr, h, w = x.shape
    if crr % (r * r):
        raise ShapeError(f"pixel_shuffle: channel count {crr} not divisible by r^2 = {r * r}")
    c = crr // (r * r)
    data = x.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)

    def grad_fn(g):
        gx = g.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(crr, h, w)
        return (gx,)

    return _make(data, (a,), "pixel_shuffle", grad_fn)


def upsample_nearest(a: Tensor, r: int) -> Tensor:
    """Repeat every cell into an r x r block on the trailing two dimensions."""
    data = np.repeat(np.repeat(a.data, r, axis=-2), r, axis=-1)
    h, w = a.shape[-2], a.shape[-1]
    lead = a.shape[:-2]

    def grad_fn(g):
        return (g.reshape(*lead, h, r, w, r).sum(axis=(-3, -1)),)

    return _make(data, (a,), "upsample_nearest", grad_fn)
