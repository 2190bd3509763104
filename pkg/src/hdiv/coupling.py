"""Invertible coupling block: additive low-frequency update, bounded affine high-frequency update.

Forward::

    v1 = u1 + phi(u2)
    s  = alpha * (2 * sigmoid(rho(v1)) - 1)
    v2 = u2 * exp(s) + eta(v1)

Inverse::

    s  = alpha * (2 * sigmoid(rho(v1)) - 1)
    u2 = (v2 - eta(v1)) * exp(-s)
    u1 = v1 - phi(u2)

The scale branch reads the *updated* low stream ``v1`` so the inverse is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, ShapeError, Tensor

SUBNET_KINDS = ("DB", "RB")
DENSE_DEPTH = 5
DEFAULT_GROWTH = {"DB": 32, "RB": 16}


@dataclass(frozen=True)
class SubnetSpec:
    kind: str
    in_channels: int
    out_channels: int
    growth: int
    slope: float = 0.2

    def __post_init__(self):
        if self.kind not in SUBNET_KINDS:
            raise ValueError(f"subnet kind must be one of {SUBNET_KINDS}, got {self.kind!r}")
        if self.in_channels <= 0 or self.out_channels <= 0 or self.growth <= 0:
            raise ValueError(f"subnet widths must be positive: {self}")

    def conv_shapes(self) -> list[tuple[int, int]]:
        """(in, out) channel pair of each 3x3 convolution, in evaluation order."""
        if self.kind == "RB":
            return [(self.in_channels, self.growth), (self.growth, self.out_channels)]
        shapes = [(self.in_channels + i * self.growth, self.growth) for i in range(DENSE_DEPTH - 1)]
        shapes.append((self.in_channels + (DENSE_DEPTH - 1) * self.growth, self.out_channels))
        return shapes


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], slope: float, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / ((1 + slope ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Subnet:
    """A DenseBlock or ResidualBlock of 3x3 convolutions; last layer zero-initialised."""

    def __init__(self, spec: SubnetSpec, params: ParamStore, prefix: str,
                 rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        shapes = spec.conv_shapes()
        for i, (cin, cout) in enumerate(shapes):
            wshape = (cout, cin, 3, 3)
            if i == len(shapes) - 1:
                w = np.zeros(wshape, dtype=dtype)
            else:
                w = kaiming_uniform(rng, wshape, spec.slope, dtype)
            self.weights.append(params.add(f"{prefix}.conv{i}.weight", Tensor(w)))
            self.biases.append(params.add(f"{prefix}.conv{i}.bias", Tensor(np.zeros(cout, dtype=dtype))))

    def __call__(self, x: Tensor) -> Tensor:
        return subnet_eval(self, x)


def subnet_eval(net: Subnet, x: Tensor) -> Tensor:
    spec = net.spec
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"subnet expects {spec.in_channels} channels, got {x.shape[1]}")
    ws, bs = net.weights, net.biases
    if spec.kind == "RB":
        hidden = T.leaky_relu(T.conv2d(x, ws[0], bs[0]), spec.slope)
        return T.conv2d(hidden, ws[1], bs[1])
    feats = [x]
    for i in range(DENSE_DEPTH - 1):
        inp = feats[0] if len(feats) == 1 else T.concat_channels(feats)
        feats.append(T.leaky_relu(T.conv2d(inp, ws[i], bs[i]), spec.slope))
    return T.conv2d(T.concat_channels(feats), ws[-1], bs[-1])


def scale_fn(t: Tensor, alpha: float) -> Tensor:
    """Centered sigmoid times alpha, bounded in (-alpha, alpha)."""
    return T.shift(T.scale(T.sigmoid(t), 2 * alpha), -alpha)


@dataclass
class InvBlockParams:
    c_lf: int
    c_hf: int
    phi: Subnet  # HF -> LF
    rho: Subnet  # LF -> HF (log-scale)
    eta: Subnet  # LF -> HF (shift)
    alpha: float = 1.0

    @classmethod
    def create(cls, c_lf: int, c_hf: int, kind: str, growth: int, alpha: float,
               params: ParamStore, prefix: str, rng: np.random.Generator, dtype=np.float32):
        def net(name, cin, cout):
            return Subnet(SubnetSpec(kind, cin, cout, growth), params, f"{prefix}.{name}", rng, dtype)

        return cls(c_lf, c_hf, net("phi", c_hf, c_lf), net("rho", c_lf, c_hf), net("eta", c_lf, c_hf), alpha)

    def _check(self, a: Tensor, b: Tensor) -> None:
        if a.shape[1] != self.c_lf or b.shape[1] != self.c_hf:
            raise ShapeError(f"block split is ({self.c_lf}, {self.c_hf}), got ({a.shape[1]}, {b.shape[1]})")


def invblock_forward(p: InvBlockParams, u1: Tensor, u2: Tensor) -> tuple[Tensor, Tensor]:
    p._check(u1, u2)
    v1 = T.add(u1, p.phi(u2))
    s = scale_fn(p.rho(v1), p.alpha)
    v2 = T.add(T.mul(u2, T.exp(s)), p.eta(v1))
    return v1, v2


def invblock_inverse(p: InvBlockParams, v1: Tensor, v2: Tensor) -> tuple[Tensor, Tensor]:
    p._check(v1, v2)
    s = scale_fn(p.rho(v1), p.alpha)
    u2 = T.mul(T.sub(v2, p.eta(v1)), T.exp(T.neg(s)))
    u1 = T.sub(v1, p.phi(u2))
    return u1, u2


def invblock_log_det(p: InvBlockParams, u1: Tensor, u2: Tensor) -> float:
    """log|det J| of one forward block, summed over the batch (diagnostic)."""
    p._check(u1, u2)
    with T.no_grad():
        v1 = T.add(u1, p.phi(u2))
        s = scale_fn(p.rho(v1), p.alpha)
    return float(s.data.sum(dtype=np.float64))
