"""Haar analysis/synthesis on NCHW tensors.

Band order along channels is [LL, HL, LH, HH], each a block of C channels.
With the default ``/4`` normalisation LL is exactly 2x2 average pooling.
For a 2x2 block (a b / c d)::

    LL = (a + b + c + d) / 4      HL = (a - b + c - d) / 4
    LH = (a + b - c - d) / 4      HH = (a - b - c + d) / 4

``orthonormal=True`` uses coefficients of +-1/2 instead, which preserves energy.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, _make

# rows: LL, HL, LH, HH; columns: a, b, c, d
HAAR_MATRIX = 0.25 * np.array([
    [1, 1, 1, 1],
    [1, -1, 1, -1],
    [1, 1, -1, -1],
    [1, -1, -1, 1],
], dtype=np.float64)


def dwt_haar(x: Tensor, orthonormal: bool = False) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"dwt_haar expects NCHW, got {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"dwt_haar needs even spatial size, got {h}x{w}")
    kern = _kernels.active
    out = kern.haar_fwd(x.data)
    if orthonormal:
        out *= 2
        # adjoint of the orthonormal map is its inverse
        return _make(out, (x,), lambda g: (kern.haar_inv(g) * 0.5,), "dwt_haar")
    # adjoint of the /4 map is (1/4) * synthesis
    return _make(out, (x,), lambda g: (kern.haar_inv(g) * 0.25,), "dwt_haar")


def idwt_haar(t: Tensor, orthonormal: bool = False) -> Tensor:
    if t.ndim != 4:
        raise ShapeError(f"idwt_haar expects NCHW, got {t.shape}")
    if t.shape[1] % 4:
        raise ShapeError(f"idwt_haar needs channels divisible by 4, got {t.shape[1]}")
    kern = _kernels.active
    if orthonormal:
        out = kern.haar_inv(t.data) * 0.5
        return _make(out, (t,), lambda g: (kern.haar_fwd(g) * 2,), "idwt_haar")
    out = kern.haar_inv(t.data)
    # adjoint of synthesis is 4 * analysis
    return _make(out, (t,), lambda g: (kern.haar_fwd(g) * 4,), "idwt_haar")


def haar_log_det(c: int, h: int, w: int, orthonormal: bool = False) -> float:
    """log|det| of the whole transform on a C x H x W input (one 4x4 block per 2x2 patch)."""
    if h % 2 or w % 2:
        raise ShapeError(f"haar_log_det needs even spatial size, got {h}x{w}")
    m = HAAR_MATRIX * 2 if orthonormal else HAAR_MATRIX
    _, logabs = np.linalg.slogdet(m)
    return (c * h * w // 4) * float(logabs)


def haar_block_det(orthonormal: bool = False) -> float:
    m = HAAR_MATRIX * 2 if orthonormal else HAAR_MATRIX
    return float(abs(np.linalg.det(m)))

