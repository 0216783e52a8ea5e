"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation in
this module returns a new tensor that remembers its inputs and a closure
mapping the output adjoint to input adjoints. :func:`backward` sorts the
recorded operations topologically (a :class:`Graph`) and replays the
closures in reverse.

All random draws go through :func:`make_rng`, a PCG64 ``numpy`` generator,
so that every stochastic op receives an explicit, seedable stream.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateStatisticsError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "Graph",
    "BNParams",
    "make_rng",
    "set_default_dtype",
    "get_default_dtype",
    "no_grad",
    "backward",
    "conv2d",
    "batch_norm",
    "relu",
    "max_pool2d",
    "dropout",
    "softmax",
    "smooth_l1",
]

_DTYPE = np.float64
_GRAD_ENABLED = True

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def set_default_dtype(dtype) -> None:
    """Select the repo-wide real type (``float64`` or ``float32``)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ContractError(f"unsupported dtype {dtype}; use float64 or float32")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def log(self) -> "Tensor":
        return log(self)

    def exp(self) -> "Tensor":
        return exp(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype or _DTYPE))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite value in output")
    out = Tensor._wrap(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


class Graph:
    """Operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor ``t`` on the graph."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    graph = graph if graph is not None else Graph.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), fn, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), fn, "mul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), fn, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], copy=True)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), fn, "take")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at zero is zero."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * mask,), "relu")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after max subtraction."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs at least one entry on the last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), fn, "softmax")


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise smooth-L1: ``0.5 x**2`` for ``|x| <= 1`` else ``|x| - 0.5``."""
    ax = np.abs(x.data)
    small = ax <= 1.0
    out = np.where(small, 0.5 * x.data * x.data, ax - 0.5)
    return _result(out, (x,), lambda g: (g * np.where(small, x.data, np.sign(x.data)),), "smooth_l1")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng stream")
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep * scale
    out = x.data * mask
    return _result(out.astype(x.dtype), (x,), lambda g: (g * mask,), "dropout")


# convolution and pooling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x[N,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise DimensionError(f"conv2d channel axis mismatch: input Cin={cin}, weight Cin={wcin}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{wd + 2 * pad} (axes H, W)"
        )
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {b.shape} does not match Cout={cout}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    pointwise = kh == 1 and kw == 1 and pad == 0
    if pointwise:
        xs = x.data[:, :, : stride * ho : stride, : stride * wo : stride]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, cin)
        wmat = w.data.reshape(cout, cin)
    else:
        # im2col in channel-last order so window copies and col2im adds run over contiguous channels
        xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=x.dtype)
        xp[:, pad : pad + h, pad : pad + wd] = x.data.transpose(0, 2, 3, 1)
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : stride * ho : stride, : stride * wo : stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
        wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, cin)
            if pointwise:
                gx = np.zeros(x.shape, dtype=x.dtype)
                gx[:, :, : stride * ho : stride, : stride * wo : stride] = dcols[:, :, :, 0, 0].transpose(0, 3, 1, 2)
            else:
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                for a in range(kh):
                    for c in range(kw):
                        gxp[:, a : a + stride * ho : stride, c : c + stride * wo : stride] += dcols[:, :, :, a, c]
                gx = gxp[:, pad : pad + h, pad : pad + wd].transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, fn, "conv2d")


def max_pool2d(x: Tensor, win: int, stride: int | None = None) -> Tensor:
    """Windowed maximum; ties route the gradient to the first row-major index."""
    stride = stride or win
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if win > h or win > w:
        raise DimensionError(f"max_pool2d window {win} larger than input {h}x{w} (axes H, W)")
    ho = (h - win) // stride + 1
    wo = (w - win) // stride + 1
    view = sliding_window_view(x.data, (win, win), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = view.reshape(n, c, ho, wo, win * win)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, win)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (ni[:, :, None, None], ci[:, :, None, None], rows, cols), g)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), fn, "max_pool2d")


# batch normalization


@dataclass
class BNParams:
    """Per-channel batch-norm parameters and running statistics.

    ``running_mean`` and ``running_var`` are plain tensors updated in place
    by :func:`batch_norm` in training mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = BN_EPS
    momentum_stat: float = BN_MOMENTUM

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise DimensionError("BNParams fields must share the channel length")
        if self.eps <= 0:
            raise ContractError("BN eps must be positive")
        if not 0.0 < self.momentum_stat < 1.0:
            raise ContractError("BN momentum_stat must lie in (0, 1)")

    @classmethod
    def identity(cls, channels: int, requires_grad: bool = True) -> "BNParams":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=requires_grad),
            beta=Tensor(np.zeros(channels), requires_grad=requires_grad),
            running_mean=Tensor(np.zeros(channels)),
            running_var=Tensor(np.ones(channels)),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, p: BNParams, training: bool) -> Tensor:
    """Normalize ``x[N,C,H,W]`` per channel, then scale by gamma and shift by beta."""
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if c != p.channels:
        raise DimensionError(f"batch_norm channel axis mismatch: input C={c}, params C={p.channels}")
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)
    m = n * h * w
    if training:
        if m < 2:
            raise DegenerateStatisticsError(
                f"batch_norm in training mode needs N*H*W >= 2 per channel, got {m}"
            )
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        ms = p.momentum_stat
        p.running_mean.data[...] = ms * p.running_mean.data + (1 - ms) * mean.reshape(c)
        p.running_var.data[...] = ms * p.running_var.data + (1 - ms) * var.reshape(c) * (m / (m - 1))
    else:
        mean = p.running_mean.data.reshape(1, c, 1, 1)
        xc = x.data - mean
        var = p.running_var.data.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    out = (gamma * xhat + beta).astype(x.dtype)

    def fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if training:
            gx = inv / m * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return _result(out, (x, p.gamma, p.beta), fn, "batch_norm")
