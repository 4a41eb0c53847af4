"""Minimal reverse-mode differentiable arrays on top of numpy.

Only the operations the pre-training pipeline needs are provided. Every
result that depends on an array with ``requires_grad`` keeps a link to its
parents and a closure that maps the output gradient to parent gradients.
Calling :meth:`DiffArray.backward` on a scalar walks that record once in
reverse topological order and then frees it.

Broadcasting is restricted to trailing dimensions: the smaller operand's
shape must be a suffix of the larger one's.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInput, DomainError, NotScalar, ShapeMismatch

_DEFAULT_DTYPE = [np.float32]


def default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new arrays (e.g. ``np.float64``)."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class DiffArray:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, DiffArray):
            data = data.data
        dtype = dtype or default_dtype()
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def detach(self) -> "DiffArray":
        return DiffArray(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def backward(self):
        backward(self)


def as_array(x, dtype=None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        dtype = x.dtype
    return DiffArray(x, dtype=dtype)


def parameter(data, dtype=None) -> DiffArray:
    """Leaf array that accumulates gradients."""
    return DiffArray(data, requires_grad=True, dtype=dtype)


def record(data: np.ndarray, parents: Sequence[DiffArray], backward_fn, op: str) -> DiffArray:
    """Wrap ``data`` as the output of an operation.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    Nothing is recorded when no parent requires gradients.
    """
    out = DiffArray.__new__(DiffArray)
    out.data = data
    out.op = op
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every reachable array."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # the record is single-use
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise

def _check_broadcast(a: np.ndarray, b: np.ndarray):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeMismatch(f"cannot broadcast {sa} with {sb} (trailing dims only)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


def _binary(a, b):
    a = as_array(a)
    b = as_array(b, dtype=a.data.dtype)
    _check_broadcast(a.data, b.data)
    return a, b


def add(a, b) -> DiffArray:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> DiffArray:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> DiffArray:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                  "mul")


def scale(a, factor: float) -> DiffArray:
    a = as_array(a)
    f = a.data.dtype.type(factor)
    return record(a.data * f, (a,), lambda g: (g * f,), "scale")


def relu(a) -> DiffArray:
    a = as_array(a)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                  lambda g: (g * mask,), "relu")


def exp(a) -> DiffArray:
    a = as_array(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> DiffArray:
    a = as_array(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    x = a.data
    return record(np.log(x), (a,), lambda g: (g / x,), "log")


_ELEMENTWISE = {
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "scale": scale,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op_kind: str, a, b=None) -> DiffArray:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("relu", "exp", "log"):
        return fn(a)
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def reduce(op_kind: str, x, axis=None, keepdims: bool = False) -> DiffArray:
    x = as_array(x)
    if op_kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op_kind!r}")
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for ax in axes:
            if not -x.ndim <= ax < x.ndim:
                raise ShapeMismatch(f"axis {ax} out of range for shape {x.shape}")
        axes = tuple(ax % x.ndim for ax in axes)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    else:
        axes = tuple(range(x.ndim))
        count = x.size
    shape = x.shape
    if op_kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        factor = 1.0
    else:
        out = x.data.mean(axis=axes, keepdims=keepdims)
        factor = 1.0 / max(count, 1)
    out = np.asarray(out, dtype=x.data.dtype)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * x.data.dtype.type(factor), shape).copy(),)

    return record(out, (x,), back, op_kind)


def sum(x, axis=None, keepdims=False) -> DiffArray:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False) -> DiffArray:
    return reduce("mean", x, axis, keepdims)


def _check_temperature(temperature):
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")


def softmax(x, axis: int = -1, temperature: float = 1.0) -> DiffArray:
    _check_temperature(temperature)
    x = as_array(x)
    z = x.data / x.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    inv_t = x.data.dtype.type(1.0 / temperature)

    def back(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y * inv_t,)

    return record(y, (x,), back, "softmax")


def log_softmax(x, axis: int = -1, temperature: float = 1.0) -> DiffArray:
    _check_temperature(temperature)
    x = as_array(x)
    z = x.data / x.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    inv_t = x.data.dtype.type(1.0 / temperature)

    def back(g):
        y = np.exp(out)
        return ((g - y * g.sum(axis=axis, keepdims=True)) * inv_t,)

    return record(out, (x,), back, "log_softmax")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> DiffArray:
    x = as_array(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInput("cannot normalize a (near) zero vector")
    y = x.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return record(y, (x,), back, "l2_normalize")


def bin_edges(length: int, bins: int) -> list[int]:
    """Boundaries ``floor(b * length / bins)`` for ``b = 0..bins``."""
    return [(b * length) // bins for b in range(bins + 1)]


def avgpool_seq(x, bins: int) -> DiffArray:
    """Adaptive average pooling of the last (frame) axis into ``bins`` bins."""
    x = as_array(x)
    length = x.shape[-1]
    if not 1 <= bins <= length:
        raise DomainError(f"bins must be in [1, {length}], got {bins}")
    edges = bin_edges(length, bins)
    counts = np.diff(edges)
    out = np.add.reduceat(x.data, edges[:-1], axis=-1) / counts.astype(x.data.dtype)
    owner = np.repeat(np.arange(bins), counts)
    inv = (1.0 / counts).astype(x.data.dtype)

    def back(g):
        return (np.take(g * inv, owner, axis=-1),)

    return record(out.astype(x.data.dtype), (x,), back, "avgpool_seq")


# ---------------------------------------------------------------------------
# structural

def reshape(x, shape) -> DiffArray:
    x = as_array(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> DiffArray:
    x = as_array(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def take(x, indices, axis: int = 0) -> DiffArray:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    x = as_array(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx.ravel(), np.moveaxis(g, axis, 0).reshape((idx.size,) + moved.shape[1:]))
        return (out,)

    return record(np.take(x.data, idx, axis=axis), (x,), back, "take")


def concat(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [as_array(a) for a in arrays]
    axis = axis % arrays[0].ndim
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([a.data for a in arrays], axis=axis), arrays, back, "concat")


# ---------------------------------------------------------------------------
# convolution and pooling

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, kernels, bias=None, stride=1, padding=0) -> DiffArray:
    """Cross-correlation of ``x`` (B, C, H, W) with ``kernels`` (O, C, kh, kw).

    ``padding`` is zero padding declared by the caller; nothing is implied.
    ``bias`` has shape (O,).
    """
    x, w = as_array(x), as_array(kernels)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d input {x.shape} vs kernels {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw or (Hp - kh) % sh or (Wp - kw) % sw:
        raise ShapeMismatch(
            f"input {H}x{W} (padding {ph},{pw}) incompatible with kernel {kh}x{kw} stride {sh},{sw}"
        )
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_array(bias)
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, w) if bias is None else (x, w, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(np.ascontiguousarray(out), parents, back, "conv2d")


def maxpool2d(x, window=2) -> DiffArray:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_array(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects (B, C, H, W), got {x.shape}")
    kh, kw = _pair(window)
    B, C, H, W = x.shape
    Ho, Wo = H // kh, W // kw
    if Ho == 0 or Wo == 0:
        raise ShapeMismatch(f"window {kh}x{kw} larger than input {H}x{W}")
    blocks = x.data[:, :, :Ho * kh, :Wo * kw].reshape(B, C, Ho, kh, Wo, kw)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, kh * kw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((B, C, Ho, Wo, kh * kw), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, Ho, Wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * kh, Wo * kw)
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, :Ho * kh, :Wo * kw] = gb
        return (gx,)

    return record(out, (x,), back, "maxpool2d")


def conv1d_seq(x, kernels, bias=None, padding=0) -> DiffArray:
    """Convolution along the frame axis: ``x`` (B, F, T), ``kernels`` (O, F, k)."""
    x, w = as_array(x), as_array(kernels)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeMismatch(f"conv1d_seq input {x.shape} vs kernels {w.shape}")
    B, F, T = x.shape
    O, _, k = w.shape
    out = conv2d(reshape(x, (B, F, 1, T)), reshape(w, (O, F, 1, k)), bias,
                 stride=1, padding=(0, padding))
    return reshape(out, (B, O, out.shape[-1]))


# ---------------------------------------------------------------------------
# verification

def grad_check(f: Callable[..., DiffArray], x, h: float = 1e-5) -> float:
    """Largest relative gap between backward gradients and central differences.

    ``x`` is one array or a sequence of arrays; ``f`` receives the same
    structure as DiffArrays and returns a scalar. The error for a
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    single = not isinstance(x, (list, tuple))
    xs = [np.array(x.data if isinstance(x, DiffArray) else x, dtype=np.float64)
          for x in ([x] if single else x)]

    def call(arrays):
        args = arrays[0] if single else arrays
        return f(args)

    with precision(np.float64):
        leaves = [parameter(a.copy()) for a in xs]
        loss = call(leaves)
        if loss.data.size != 1:
            raise NotScalar("grad_check needs a scalar function")
        backward(loss)
        worst = 0.0
        for i, base in enumerate(xs):
            analytic = leaves[i].grad
            flat = base.reshape(-1)
            for j in range(flat.size):
                plus = [a.copy() for a in xs]
                minus = [a.copy() for a in xs]
                plus[i].reshape(-1)[j] += h
                minus[i].reshape(-1)[j] -= h
                fp = float(call([DiffArray(a) for a in plus]).data)
                fm = float(call([DiffArray(a) for a in minus]).data)
                numeric = (fp - fm) / (2 * h)
                err = abs(float(analytic.reshape(-1)[j]) - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
