"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input tracks
gradients the output remembers its parents together with a closure that maps
the output gradient to one gradient per parent; :func:`backward` replays those
closures in reverse topological order.

Broadcasting is deliberately limited to scalar-with-tensor. Anything else must
go through an explicit op (``reshape``, ``scale_channels``).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
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
    """An n-dimensional real array that can take part in a gradient tape.

    Args:
        data: Anything ``np.asarray`` accepts.
        requires_grad: Track this tensor as a differentiable leaf.
        dtype: Element type; 32-bit float unless given.
        name: Optional label, used for parameters and error messages.
    """

    __array_priority__ = 1000  # so ndarray + Tensor defers to Tensor.__radd__

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._consumed = False

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------

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

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis=axis)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis=axis)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Leaves accumulate across calls; interior nodes get their gradient for this
    pass only. The recorded graph is released afterwards, so calling this twice
    on the same loss is an error.
    """
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed by an earlier backward()")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary_operands(a, b, opname: str) -> Tuple[Tensor, Tensor]:
    a_is_t, b_is_t = isinstance(a, Tensor), isinstance(b, Tensor)
    ref = a if a_is_t else b
    a = a if a_is_t else Tensor(a, dtype=ref.dtype)
    b = b if b_is_t else Tensor(b, dtype=ref.dtype)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        axes = [
            i
            for i, (sa, sb) in enumerate(zip(a.shape[::-1], b.shape[::-1]))
            if sa != sb
        ]
        detail = f"axes (from the right) {axes}" if a.ndim == b.ndim else "rank"
        raise DimensionError(
            f"{opname}: shapes {a.shape} and {b.shape} differ in {detail}; "
            "only scalar-with-tensor broadcasting is supported"
        )
    return a, b


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _unscalar(g, a), _unscalar(g, b)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _unscalar(g, a), _unscalar(-g, b)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        return _unscalar(g * b.data, a), _unscalar(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unscalar(ga, a), _unscalar(-ga * out, b)

    return _make(out, (a, b), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * x.data,)

    return _make(x.data * x.data, (x,), bw)


SQRT_EPS = 1e-12


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; the backward denominator is floored at 1e-12."""
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / np.sqrt(np.maximum(x.data, SQRT_EPS)),)

    return _make(out, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    def bw(g):
        return (g * np.sign(x.data),)

    return _make(np.abs(x.data), (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * np.asarray(slope, x.dtype))

    def bw(g):
        return (np.where(pos, g, g * np.asarray(slope, g.dtype)),)

    return _make(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # exp of -|x| never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def bw(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    """Arithmetic mean; over all elements (scalar result) unless ``axis`` is given."""
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes) if axes else x.data.copy()

    def bw(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw)


def reduce_abs_mean(a: Tensor, b: Tensor) -> Tensor:
    """mean(|a - b|) as a single fused op."""
    a, b = _binary_operands(a, b, "reduce_abs_mean")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        s = np.sign(diff) * (g / n)
        return _unscalar(s, a), _unscalar(-s, b)

    return _make(np.asarray(np.abs(diff).mean(), dtype=diff.dtype), (a, b), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join along ``axis``; all other axes must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis % ref.ndim):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tensors, bw)


def batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the leading axis."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError(f"batch_slice: [{start}:{stop}] out of range for leading size {x.shape[0]}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,C,H,W] -> [N,C,1,1]."""
    _check_rank(x, 4, "global_avg_pool")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bw(g):
        return (np.broadcast_to(g / hw, x.shape).copy(),)

    return _make(out.astype(x.dtype), (x,), bw)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each [H,W] plane of x[N,C,H,W] by the matching s[N,C,1,1]."""
    _check_rank(x, 4, "scale_channels")
    if s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise DimensionError(
            f"scale_channels: scale shape {s.shape} must be (N, C, 1, 1) = "
            f"({x.shape[0]}, {x.shape[1]}, 1, 1)"
        )

    def bw(g):
        return g * s.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return _make(x.data * s.data, (x, s), bw)


def _check_rank(x: Tensor, rank: int, opname: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{opname}: expected rank-{rank} input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # layout (C, kh, kw, N, Ho, Wo) so that one GEMM covers the whole batch
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    Shapes: x [N,C,H,W], weight [K,C,kh,kw], bias [K] -> [N,K,H',W'] with
    H' = floor((H + 2*padding - kh) / stride) + 1.
    """
    _check_rank(x, 4, "conv2d")
    _check_rank(weight, 4, "conv2d weight")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(
            f"conv2d: input channel axis (1) has {c} but weight axis 1 expects {wc}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel axes (2, 3) must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} must be ({k},) to match weight axis 0")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: spatial axes (2, 3) of size {h}x{w} too small for a {kh}x{kw} kernel"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    if kh == kw == 1 and stride == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(k, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the running
    buffers, when given, are updated in place (unbiased variance, exponential
    average). Eval mode normalizes with the running buffers.
    """
    _check_rank(x, 4, "batch_norm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d: gamma/beta must have shape ({c},) to match axis 1")
    shp = (1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm2d: training mode needs N*H*W >= 2 to estimate variance")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm2d: eval mode needs running statistics")
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shp)) * inv_std.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shp)
        if training:
            gx = (inv_std.reshape(shp) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(shp)
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# initialization and optimization
# ---------------------------------------------------------------------------


def he_normal(shape: Sequence[int], rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Zero-mean normal with std sqrt(2 / fan_in); fan_in = prod(shape[1:])."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Adam:
    """ADAM with bias correction, updating parameters in place.

    ``lr`` may be changed between steps (e.g. by a schedule).
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.99,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                label = p.name or f"#{i} {p.shape}"
                raise RuntimeError(f"Adam.step: parameter {label} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step = self.lr / c1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (step * m / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params, state: Adam, lr, beta1=0.9, beta2=0.99, eps=1e-8) -> None:
    """Functional wrapper around :class:`Adam` for callers that keep the state."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("adam_step: state was created for a different parameter list")
    state.lr, state.beta1, state.beta2, state.eps = lr, beta1, beta2, eps
    state.step()
