"""Training objective: low-frequency guidance, latent distribution matching, reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

VAR_FLOOR = 1e-6


@dataclass
class LossWeights:
    recon: float = 1.0
    guide: float = 4.0
    dist: float = 1.0

    def __post_init__(self):
        for name in ("recon", "guide", "dist"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def guide_loss(lf_bands: Sequence[Tensor], guides: Sequence) -> Tensor:
    """Sum over levels of the per-level mean squared error to the downsampled clean image."""
    if len(lf_bands) != len(guides) or not lf_bands:
        raise ShapeError(f"{len(lf_bands)} bands vs {len(guides)} guides")
    total = None
    for band, guide in zip(lf_bands, guides):
        g = _const(guide, band)
        if g.shape != band.shape:
            raise ShapeError(f"guide shape {g.shape} vs band shape {band.shape}")
        term = T.mean(T.square(T.sub(band, g)))
        total = term if total is None else T.add(total, term)
    return total


def dist_loss(latent: Tensor) -> Tensor:
    """Mean over channels of KL(N(mu_c, var_c) || N(0, 1)), moments over batch and space."""
    n, c, h, w = latent.shape
    if n * h * w < 2:
        raise ShapeError(f"need >= 2 elements per channel to fit a variance, got {n * h * w}")
    mu = T.channel_mean(latent)
    mu2 = T.square(mu)
    var = T.clamp_min(T.sub(T.channel_mean(T.square(latent)), mu2), VAR_FLOOR)
    kl = T.shift(T.sub(T.add(mu2, var), T.log(var)), -1.0)
    return T.scale(T.mean(kl), 0.5)


def recon_loss(x, x_hat: Tensor) -> Tensor:
    """Mean absolute error."""
    xt = _const(x, x_hat)
    if xt.shape != x_hat.shape:
        raise ShapeError(f"recon_loss shape mismatch {xt.shape} vs {x_hat.shape}")
    return T.mean(T.abs_(T.sub(x_hat, xt)))


def total_loss(recon: Tensor, guide: Tensor, dist: Tensor, w: LossWeights) -> Tensor:
    for name, t in (("recon", recon), ("guide", guide), ("dist", dist)):
        if t.size != 1 or not math.isfinite(float(t.data)):
            raise FloatingPointError(f"{name} loss is not a finite scalar: {t.data}")
    out = T.scale(recon, w.recon)
    out = T.add(out, T.scale(guide, w.guide))
    return T.add(out, T.scale(dist, w.dist))
