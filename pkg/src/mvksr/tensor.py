"""Minimal dense tensors with reverse-mode automatic differentiation.

Only the operations the restoration network and its losses need are
implemented. Data lives in numpy arrays; every op records a closure that maps
the output gradient to gradients of its parents.

Set ``MVKSR_DEBUG=1`` to assert that every forward op produces finite values.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG = os.environ.get("MVKSR_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable | None = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite output from finite inputs")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars adopt the other operand's dtype
    if a.data.ndim == 0 and not a.requires_grad and b.dtype != a.dtype:
        a = Tensor(a.data.astype(b.dtype))
    if b.data.ndim == 0 and not b.requires_grad and a.dtype != b.dtype:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is blocked where the floor is active."""
    mask = a.data > floor
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.dtype))
    return _result(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop], (a,), bw)


def concat_channels(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for i, t in enumerate(tensors):
        if t.data.ndim != len(ref):
            raise ShapeError(f"concat_channels: operand {i} has rank {t.data.ndim}, expected {len(ref)}")
        for ax in range(len(ref)):
            if ax != 1 and t.shape[ax] != ref[ax]:
                raise ShapeError(
                    f"concat_channels: operand {i} dim {ax} is {t.shape[ax]}, expected {ref[ax]}"
                )
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, bw)


def flip(a: Tensor, axis: int) -> Tensor:
    return _result(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),))


# ---------------------------------------------------------------- image ops


def _im2col(xp: np.ndarray, k: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*K*K, N*Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i * dilation : i * dilation + ho, j * dilation : j * dilation + wo]
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (NCHW input, OIKK weight)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got rank {x.data.ndim}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be OIKK, got rank {weight.data.ndim}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} != weight in-channels {ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if dilation < 1 or padding < 0:
        raise ValueError("conv2d: dilation must be >= 1 and padding >= 0")
    ho = h + 2 * padding - dilation * (k - 1)
    wo = w + 2 * padding - dilation * (k - 1)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: output would be empty ({ho}x{wo})")

    wmat = weight.data.reshape(o, c * k * k)
    pointwise = k == 1 and padding == 0
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(xp, k, dilation, ho, wo)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = wmat.T @ g2
            if pointwise:
                gx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                dcols = dcols.reshape(c, k, k, n, ho, wo)
                hp, wp = h + 2 * padding, w + 2 * padding
                gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i * dilation : i * dilation + ho, j * dilation : j * dilation + wo] += dcols[:, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, bw)


def downsample_avg2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_avg2: spatial size {h}x{w} must be even; pad the input first")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result(out, (x,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over (C, H, W), then apply a per-channel affine map."""
    n = x.shape[0]
    c = x.shape[1]
    xs = x.data.reshape(n, -1)
    m = xs.shape[1]
    mu = xs.mean(axis=1, keepdims=True)
    xc = xs - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    out = xhat * gain.data.reshape(bshape) + bias.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.data.ndim))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * gain.data.reshape(bshape)).reshape(n, -1)
            xh = xhat.reshape(n, -1)
            gx = inv / m * (m * dxhat - dxhat.sum(axis=1, keepdims=True) - xh * (dxhat * xh).sum(axis=1, keepdims=True))
            gx = gx.reshape(x.shape)
        ggain = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gbias = g.sum(axis=red) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), bw)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1)."""
    bshape = (1, slope.shape[0]) + (1,) * (x.data.ndim - 2)
    a = slope.data.reshape(bshape)
    pos = x.data >= 0
    out = np.where(pos, x.data, a * x.data)
    red = (0,) + tuple(range(2, x.data.ndim))

    def bw(g):
        gx = np.where(pos, g, a * g) if x.requires_grad else None
        gs = np.where(pos, 0.0, g * x.data).sum(axis=red) if slope.requires_grad else None
        return gx, gs

    return _result(out, (x, slope), bw)


def sep_filter_valid(x: Tensor, taps: np.ndarray) -> Tensor:
    """Separable 'valid' correlation of every channel with the same 1-D taps."""
    taps = np.asarray(taps, dtype=x.dtype)
    k = taps.size
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"sep_filter_valid: image {h}x{w} smaller than {k}-tap window")
    ho, wo = h - k + 1, w - k + 1
    tmp = np.zeros((n, c, ho, w), dtype=x.dtype)
    for i in range(k):
        tmp += taps[i] * x.data[:, :, i : i + ho, :]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for j in range(k):
        out += taps[j] * tmp[:, :, :, j : j + wo]

    def bw(g):
        gt = np.zeros((n, c, ho, w), dtype=g.dtype)
        for j in range(k):
            gt[:, :, :, j : j + wo] += taps[j] * g
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        for i in range(k):
            gx[:, :, i : i + ho, :] += taps[i] * gt
        return (gx,)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate across calls; call ``zero_grad`` (or let the
    optimizer step clear them) between iterations.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.dtype != p.data.dtype:
                pg = pg.astype(p.data.dtype)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def parameters_from(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
