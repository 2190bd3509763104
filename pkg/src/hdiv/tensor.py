"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds its output with :func:`_make`, handing over a closure that maps
the output gradient to one gradient per parent. :func:`backward` walks the
recorded graph in reverse topological order. There is no broadcasting beyond
python scalars: binary tensor ops require equal shapes.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

DTYPES = {"f32": np.float32, "f64": np.float64}

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, validation)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.dtype.type(c), (a,), lambda g: (g,), "shift")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    slope = ad.dtype.type(slope)
    mask = ad > 0
    out = np.where(mask, ad, ad * slope)
    return _make(out, (a,), lambda g: (np.where(mask, g, g * slope),), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1 / (1 + e), e / (1 + e)).astype(ad.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    mask = ad >= floor
    out = np.where(mask, ad, ad.dtype.type(floor))
    return _make(out, (a,), lambda g: (np.where(mask, g, 0),), "clamp_min")


_UNARY = {
    "exp": exp, "negate": neg, "sigmoid": sigmoid, "abs": abs_,
    "square": square, "log": log,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, exp, negate, leaky_relu, sigmoid, abs, square, log."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "leaky_relu":
        return leaky_relu(a, **kwargs)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.full(shape, g, dtype=a.dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                 lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def channel_mean(a: Tensor) -> Tensor:
    """N,C,H,W -> C: mean over batch and spatial positions."""
    if a.ndim != 4:
        raise ShapeError(f"channel_mean expects NCHW, got {a.shape}")
    n, c, h, w = a.shape
    count = n * h * w

    def bw(g):
        return (np.broadcast_to((g / count).reshape(1, c, 1, 1), a.shape).astype(a.dtype),)

    return _make(a.data.mean(axis=(0, 2, 3)), (a,), bw, "channel_mean")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)  # callers may keep appending to their list
    if not parts:
        raise ShapeError("concat_channels of an empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {p.shape}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat")


def split_channels(t: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != t.shape[1] or any(s <= 0 for s in sizes):
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not partition {t.shape[1]} channels")
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def bw(g, lo=lo, hi=hi):
            full = np.zeros(t.shape, dtype=t.dtype)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_make(np.ascontiguousarray(t.data[:, lo:hi]), (t,), bw, "split"))
        start = hi
    return outs


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int | None = None) -> Tensor:
    """Cross-correlation, NCHW input, OIKK weights, stride 1."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected {(o,)}")
    if pad is None:
        pad = (k - 1) // 2
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    kern = _kernels.active
    cols = kern.im2col(x.data, k, pad)  # c*k*k, n*ho*wo
    wmat = w.data.reshape(o, c * k * k)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gx = gw = None
        if x.requires_grad:
            gx = kern.col2im(wmat.T @ g2, n, c, h, wd, k, pad)
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-tracking leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore(dict):
    """Ordered name -> learnable Tensor map. Insertion order is the canonical order."""

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.items()}

    def numel(self) -> int:
        return sum(p.size for p in self.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self):
            raise KeyError("parameter names or order differ")
        for k, arr in state.items():
            p = self[k]
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: shape {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype) -> None:
        for p in self.values():
            p.data = p.data.astype(dtype)


def numerical_grad(f: Callable[[], float], param: Tensor, index: tuple, h: float = 1e-3) -> float:
    """Central difference of ``f`` w.r.t. one element of ``param`` (data mutated and restored)."""
    orig = param.data[index].copy()
    param.data[index] = orig + h
    fp = f()
    param.data[index] = orig - h
    fm = f()
    param.data[index] = orig
    return (fp - fm) / (2 * h)


def gradient_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], n_samples: int,
                   rng: np.random.Generator, h: float = 1e-3) -> list[tuple[float, float]]:
    """Return (analytic, numeric) pairs for ``n_samples`` random parameter elements."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    pairs = []
    for flat in picks:
        i = int(np.searchsorted(bounds, flat, side="right"))
        p = params[i]
        idx = np.unravel_index(int(flat - (bounds[i] - sizes[i])), p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        with no_grad():
            numeric = numerical_grad(lambda: float(loss_fn().data), p, idx, h)
        pairs.append((analytic, numeric))
    return pairs
