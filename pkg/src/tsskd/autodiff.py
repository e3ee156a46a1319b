"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass. Calling
``SomeFunction.apply(*tensors)`` runs ``forward`` on the raw numpy arrays and,
when any input participates in differentiation, records the function instance
on the output tensor. :func:`backward` walks that record once in reverse
topological order and accumulates ``grad`` on leaves.

Spatial operations accept either an unbatched ``[C, H, W]`` layout or a
batched ``[N, C, H, W]`` layout; outputs keep whichever layout came in.
"""

from __future__ import annotations

import contextlib
import json
import math
from typing import BinaryIO, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GraphError, NumericError, ValidationError

KL_EPS = 1e-12
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional real array that can take part in differentiation.

    Args:
        data: Array-like values. Python scalars and lists are converted.
        requires_grad: Whether gradients should be accumulated for this tensor.
        dtype: Optional numpy dtype; defaults to float64 unless ``data`` is
            already a floating array.
    """

    __slots__ = ("data", "requires_grad", "grad", "_ctx")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # Arithmetic sugar
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, _lift(other, self))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def relu(self):
        return Relu.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def abs(self):
        return Abs.apply(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class Function:
    """Base class for recorded operations.

    ``forward`` receives numpy arrays and keyword options and returns the output
    array. ``backward`` receives the output gradient and returns one gradient
    (or ``None``) per input tensor.
    """

    __slots__ = ("inputs", "consumed", "saved", "needs_grad")

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.consumed = False
        self.saved: tuple = ()
        self.needs_grad = tuple(t.requires_grad for t in inputs)

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        needs = _grad_enabled and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs)
        if needs:
            result._ctx = fn
        else:
            fn.saved = ()
        return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` through recorded functions, root last."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that requires it.

    Raises:
        DimensionError: if ``loss`` is not a single value.
        GraphError: if the recorded graph was already consumed by an earlier call.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = graph_nodes(loss)
    for node in order:
        if node._ctx is not None and node._ctx.consumed:
            raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        fn = node._ctx
        if fn is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        fn.consumed = True
        if g is None:
            fn.saved = ()
            continue
        parent_grads = fn.backward(g)
        fn.saved = ()
        for parent, pg in zip(fn.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Elementwise arithmetic


class Add(Function):
    def forward(self, a, b):
        self.saved = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.saved
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    def forward(self, a, b):
        self.saved = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        sa, sb = self.saved
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a * b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a / b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a, exponent):
        self.saved = (a, exponent)
        return a**exponent

    def backward(self, g):
        a, p = self.saved
        return (g * p * a ** (p - 1),)


class Exp(Function):
    def forward(self, a):
        out = np.exp(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        return (g * self.saved[0],)


class Log(Function):
    def forward(self, a):
        self.saved = (a,)
        return np.log(a)

    def backward(self, g):
        return (g / self.saved[0],)


class Abs(Function):
    def forward(self, a):
        self.saved = (a,)
        return np.abs(a)

    def backward(self, g):
        # sign(0) == 0: subgradient 0 at exact zeros
        return (g * np.sign(self.saved[0]),)


class Relu(Function):
    def forward(self, a):
        mask = a > 0
        self.saved = (mask,)
        return np.where(mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * self.saved[0],)


class Tanh(Function):
    def forward(self, a):
        out = np.tanh(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        (out,) = self.saved
        return (g * (1 - out * out),)


class Sigmoid(Function):
    def forward(self, a):
        out = 0.5 * (1 + np.tanh(0.5 * a))
        self.saved = (out,)
        return out

    def backward(self, g):
        (out,) = self.saved
        return (g * out * (1 - out),)


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def tanh(a: Tensor) -> Tensor:
    return Tanh.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def absolute(a: Tensor) -> Tensor:
    return Abs.apply(a)


# ---------------------------------------------------------------------------
# Reductions and shape manipulation


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.saved = (a.shape, axis, keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        shape, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, tuple(sorted(axes)))
        return (np.broadcast_to(g, shape).copy(),)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


class Reshape(Function):
    def forward(self, a, shape):
        self.saved = (a.shape,)
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.saved[0]),)


class Transpose(Function):
    def forward(self, a, axes):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        self.saved = (axes,)
        return np.transpose(a, axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.saved[0])),)


class GetItem(Function):
    def forward(self, a, index):
        self.saved = (a.shape, a.dtype, index)
        return np.asarray(a[index])

    def backward(self, g):
        shape, dtype, index = self.saved
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.saved = (axis, [arr.shape[axis] for arr in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        axis, sizes = self.saved
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = []
    for t in tensors:
        ax = axis if axis >= 0 else t.ndim + 1 + axis
        parts.append(Reshape.apply(t, shape=t.shape[:ax] + (1,) + t.shape[ax:]))
    return Concat.apply(*parts, axis=axis)


class MatMul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a @ b

    def backward(self, g):
        a, b = self.saved
        if a.ndim == 1 and b.ndim == 1:
            return g * b, g * a
        if a.ndim == 1:
            return g @ b.T, np.outer(a, g)
        if b.ndim == 1:
            return np.outer(g, b), a.T @ g
        return g @ np.swapaxes(b, -1, -2), _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# Convolution and correlation


def _as_batched(arr: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if arr.ndim == ndim:
        return arr[None], True
    return arr, False


class Conv2dValid(Function):
    # im2col runs on a channel-last copy so the gathered rows are contiguous
    def forward(self, x, w, b=None, stride=1):
        x4, squeezed = _as_batched(x, 3)
        n, cin, h, wd = x4.shape
        cout, cin_w, kh, kw = w.shape
        if cin != cin_w:
            raise DimensionError(f"conv2d: input has {cin} channels, kernels expect {cin_w}")
        if kh > h or kw > wd:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
        xcl = np.ascontiguousarray(x4.transpose(0, 2, 3, 1))
        win = sliding_window_view(xcl, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        ho, wo = win.shape[1:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
        wmat = w.transpose(0, 2, 3, 1).reshape(cout, -1)
        out = cols @ wmat.T
        if b is not None:
            out += b
        out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
        self.saved = (xcl.shape, x4.dtype, cols, wmat, w.shape, stride, squeezed, b is not None)
        return out[0] if squeezed else out

    def backward(self, g):
        xshape, dtype, cols, wmat, wshape, stride, squeezed, has_bias = self.saved
        g4 = g[None] if squeezed else g
        n, h, wd, cin = xshape
        cout, _, kh, kw = wshape
        ho, wo = g4.shape[2:]
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gx = None
        if self.needs_grad[0]:
            gcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, cin)
            gx = np.zeros(xshape, dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[:, :, :, i, j]
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
            if squeezed:
                gx = gx[0]
        grads = (gx, np.ascontiguousarray(gw))
        if has_bias:
            grads = grads + (gmat.sum(axis=0),)
        return grads


def conv2d_valid(x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """No-padding 2-D correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernels``.

    Output extent is ``floor((H - kH) / stride) + 1`` along each spatial axis.
    """
    if int(stride) < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise DimensionError(f"conv2d: expected input [C,H,W] or [N,C,H,W] and kernels [O,C,kH,kW], got {x.shape} and {kernels.shape}")
    if bias is None:
        return Conv2dValid.apply(x, kernels, stride=int(stride))
    return Conv2dValid.apply(x, kernels, bias, stride=int(stride))


class GroupedXcorr(Function):
    """Per-sample correlation where the template feature is the kernel."""

    def forward(self, s, t, groups):
        s4, squeezed = _as_batched(s, 3)
        t4, _ = _as_batched(t, 3)
        n, cs, hx, wx = s4.shape
        nt, ct, hz, wz = t4.shape
        if n != nt:
            raise DimensionError(f"xcorr: batch mismatch {n} vs {nt}")
        if cs != ct:
            raise DimensionError(f"xcorr: channel mismatch, search has {cs}, template has {ct}")
        if cs % groups:
            raise DimensionError(f"grouped_xcorr: {cs} channels not divisible by {groups} groups")
        if hz > hx or wz > wx:
            raise DimensionError(f"xcorr: template {hz}x{wz} larger than search {hx}x{wx}")
        c = cs // groups
        scl = np.ascontiguousarray(s4.reshape(n, groups, c, hx, wx).transpose(0, 1, 3, 4, 2))
        win = sliding_window_view(scl, (hz, wz), axis=(2, 3))
        hs, ws = win.shape[2:4]
        cols = win.transpose(0, 1, 2, 3, 5, 6, 4).reshape(n, groups, hs * ws, hz * wz * c)
        tvec = t4.reshape(n, groups, c, hz, wz).transpose(0, 1, 3, 4, 2).reshape(n, groups, hz * wz * c, 1)
        out = (cols @ tvec).reshape(n, groups, hs, ws)
        self.saved = (scl.shape, cols, tvec, squeezed)
        return out[0] if squeezed else out

    def backward(self, g):
        sshape, cols, tvec, squeezed = self.saved
        g4 = g[None] if squeezed else g
        n, groups, hx, wx, c = sshape
        _, _, hs, ws = g4.shape
        hz, wz = hx - hs + 1, wx - ws + 1
        gvec = g4.reshape(n, groups, 1, hs * ws)
        gt = (gvec @ cols).reshape(n, groups, hz, wz, c).transpose(0, 1, 4, 2, 3).reshape(n, groups * c, hz, wz)
        # search gradient is a full correlation of the output gradient with the flipped template
        gpad = np.zeros((n, groups, hs + 2 * (hz - 1), ws + 2 * (wz - 1)), dtype=g4.dtype)
        gpad[:, :, hz - 1 : hz - 1 + hs, wz - 1 : wz - 1 + ws] = g4
        gwin = sliding_window_view(gpad, (hz, wz), axis=(2, 3)).reshape(n, groups, hx * wx, hz * wz)
        tflip = tvec.reshape(n, groups, hz, wz, c)[:, :, ::-1, ::-1].reshape(n, groups, hz * wz, c)
        gs = (gwin @ tflip).reshape(sshape)
        gs = np.ascontiguousarray(gs.transpose(0, 1, 4, 2, 3)).reshape(n, groups * c, hx, wx)
        gt = np.ascontiguousarray(gt)
        if squeezed:
            gs, gt = gs[0], gt[0]
        return gs, gt


def grouped_xcorr(search_feat: Tensor, template_feat: Tensor, groups: int) -> Tensor:
    """Group ``g`` of the output correlates the g-th channel blocks of both inputs.

    Shapes: ``[G*C,Hx,Wx]`` with ``[G*C,Hz,Wz]`` gives ``[G,Hs,Ws]``; a leading
    batch axis on both inputs is carried through.
    """
    if groups < 1:
        raise ValidationError(f"groups must be >= 1, got {groups}")
    if search_feat.ndim not in (3, 4) or search_feat.ndim != template_feat.ndim:
        raise DimensionError(f"xcorr: incompatible ranks {search_feat.shape} and {template_feat.shape}")
    return GroupedXcorr.apply(search_feat, template_feat, groups=int(groups))


def xcorr(search_feat: Tensor, template_feat: Tensor) -> Tensor:
    """Single-output correlation summing over all channels: ``[C,Hx,Wx] x [C,Hz,Wz] -> [Hs,Ws]``."""
    out = grouped_xcorr(search_feat, template_feat, 1)
    return Reshape.apply(out, shape=out.shape[:-3] + out.shape[-2:])


# ---------------------------------------------------------------------------
# Spatial resampling


def _linear_resize_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        if mode == "nearest":
            src = min(int(math.floor((o + 0.5) * scale)), n_in - 1)
            m[o, src] = 1.0
        else:
            pos = (o + 0.5) * scale - 0.5
            pos = min(max(pos, 0.0), n_in - 1.0)
            lo = int(math.floor(pos))
            hi = min(lo + 1, n_in - 1)
            frac = pos - lo
            m[o, lo] += 1.0 - frac
            m[o, hi] += frac
    return m


class Resize2d(Function):
    def forward(self, a, size, mode):
        mh = _linear_resize_matrix(a.shape[-2], size[0], mode).astype(a.dtype)
        mw = _linear_resize_matrix(a.shape[-1], size[1], mode).astype(a.dtype)
        self.saved = (mh, mw)
        return np.einsum("oh,...hw,pw->...op", mh, a, mw, optimize=True)

    def backward(self, g):
        mh, mw = self.saved
        return (np.einsum("oh,...op,pw->...hw", mh, g, mw, optimize=True),)


def resize2d(a: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Resize the last two axes to ``size`` (half-pixel aligned)."""
    if mode not in ("nearest", "bilinear"):
        raise ValidationError(f"unknown resize mode {mode!r}")
    size = (int(size[0]), int(size[1]))
    if a.shape[-2:] == size:
        return a
    return Resize2d.apply(a, size=size, mode=mode)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each map (last two axes) to unit Frobenius norm."""
    sq = Sum.apply(a * a, axis=(-2, -1), keepdims=True)
    return a / ((sq + eps) ** 0.5)


# ---------------------------------------------------------------------------
# Distributions and losses


class SoftmaxT(Function):
    def forward(self, a, temp):
        if not np.all(np.isfinite(a)):
            raise NumericError("softmax_t: non-finite logits")
        z = a / temp
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        self.saved = (out, temp)
        return out

    def backward(self, g):
        out, temp = self.saved
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot) / temp,)


def softmax_t(logits: Tensor, temp: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis."""
    if not temp > 0:
        raise ValidationError(f"temperature must be positive, got {temp}")
    return SoftmaxT.apply(logits, temp=float(temp))


class LogSoftmax(Function):
    def forward(self, a):
        z = a - a.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        self.saved = (out,)
        return out

    def backward(self, g):
        (out,) = self.saved
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def log_softmax(logits: Tensor) -> Tensor:
    return LogSoftmax.apply(logits)


class KLTerms(Function):
    """Elementwise ``p * log(p / q)`` with ``0 * log 0 = 0`` and an epsilon clamp."""

    def forward(self, p, q, eps):
        pc = np.maximum(p, eps)
        qc = np.maximum(q, eps)
        logratio = np.log(pc) - np.log(qc)
        self.saved = (p, q, pc, qc, logratio, eps)
        return np.where(p > 0, p * logratio, 0.0).astype(p.dtype, copy=False)

    def backward(self, g):
        p, q, pc, qc, logratio, eps = self.saved
        gp = np.where(p > 0, logratio + np.where(p >= eps, 1.0, p / eps), 0.0)
        gq = np.where(q >= eps, -p / qc, 0.0)
        return g * gp, g * gq


def kl_terms(p: Tensor, q: Tensor, eps: float = KL_EPS) -> Tensor:
    if p.shape != q.shape:
        raise DimensionError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    return KLTerms.apply(p, q, eps=eps)


def kl_div(p: Tensor, q: Tensor, eps: float = KL_EPS) -> Tensor:
    """``sum p * log(p / q)`` over every entry; zeros of ``q`` are clamped to ``eps``."""
    return Sum.apply(kl_terms(p, q, eps), axis=None, keepdims=False)


class SmoothL1Terms(Function):
    def forward(self, a, b):
        d = a - b
        ad = np.abs(d)
        small = ad < 1
        self.saved = (d, small)
        return np.where(small, 0.5 * d * d, ad - 0.5)

    def backward(self, g):
        d, small = self.saved
        gd = g * np.where(small, d, np.sign(d))
        return gd, -gd


def smooth_l1_terms(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"smooth_l1: shape mismatch {a.shape} vs {b.shape}")
    return SmoothL1Terms.apply(a, b)


def smooth_l1(a: Tensor, b: Tensor) -> Tensor:
    """Huber-style loss with unit transition, averaged over elements."""
    return mean(smooth_l1_terms(a, b))


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return mean(d * d)


class LogisticTerms(Function):
    def forward(self, s, y):
        m = -y * s
        out = np.maximum(m, 0) + np.log1p(np.exp(-np.abs(m)))
        self.saved = (s, y, m)
        return out

    def backward(self, g):
        s, y, m = self.saved
        sig = 0.5 * (1 + np.tanh(0.5 * m))
        return g * (-y) * sig, None


def logistic_terms(scores: Tensor, labels) -> Tensor:
    labels = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels, dtype=scores.dtype))
    if labels.shape != scores.shape:
        raise DimensionError(f"logistic_loss: shape mismatch {scores.shape} vs {labels.shape}")
    if not np.all(np.abs(labels.data) == 1):
        raise ValidationError("logistic_loss: labels must be +1 or -1")
    return LogisticTerms.apply(scores, labels)


def logistic_loss(scores: Tensor, labels) -> Tensor:
    """Mean of ``log(1 + exp(-y * s))`` computed in overflow-free form."""
    return mean(logistic_terms(scores, labels))


def channel_abs_sum(u: Tensor) -> Tensor:
    """Squeeze the channel axis (third from last) by summing absolute values."""
    if u.ndim < 3:
        raise DimensionError(f"channel_abs_sum expects [C,H,W] or [N,C,H,W], got {u.shape}")
    return Sum.apply(Abs.apply(u), axis=-3, keepdims=False)


# ---------------------------------------------------------------------------
# Serialization


_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def write_tensor(fp: BinaryIO, t: Tensor | np.ndarray) -> None:
    """Write a JSON header line followed by raw little-endian values."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = "f32" if arr.dtype == np.float32 else "f64"
    header = json.dumps({"shape": list(arr.shape), "dtype": code})
    fp.write(header.encode("utf-8") + b"\n")
    fp.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor(fp: BinaryIO) -> Tensor:
    line = fp.readline()
    if not line:
        raise EOFError("no tensor header")
    header = json.loads(line.decode("utf-8"))
    dtype = _DTYPES[header["dtype"]]
    shape = tuple(header["shape"])
    count = int(np.prod(shape)) if shape else 1
    raw = fp.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise EOFError("truncated tensor payload")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return Tensor(arr)
