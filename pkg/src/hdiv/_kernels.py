"""Hot inner loops: im2col / col2im for 3x3 convolutions and the Haar butterflies.

Column matrices are laid out as (C*K*K, N*Ho*Wo) so a convolution is one GEMM.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one with
identical semantics. The active backend is picked once at import time:

    HDIV_KERNELS=numpy   force the numpy path
    HDIV_KERNELS=numba   require numba (ImportError if missing)
    unset                numba when importable, numpy otherwise

Both backends stay importable as ``numpy_impl`` / ``numba_impl`` so the
benchmark and the equivalence tests can call them side by side.
"""
from __future__ import annotations

import os
import types

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skips the TBB probe, which warns on older system TBB
        numba.config.THREADING_LAYER = "workqueue"
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _im2col_np(x, k, pad):
    n, c, h, w = x.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def _col2im_np(cols, n, c, h, w, k, pad):
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += cols[:, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _haar_fwd_np(x):
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    return np.concatenate(
        ((a + b + c + d) * 0.25, (a - b + c - d) * 0.25,
         (a + b - c - d) * 0.25, (a - b - c + d) * 0.25), axis=1)


def _haar_inv_np(t):
    n, c4, h, w = t.shape
    c = c4 // 4
    ll, hl, lh, hh = t[:, :c], t[:, c:2 * c], t[:, 2 * c:3 * c], t[:, 3 * c:]
    out = np.empty((n, c, 2 * h, 2 * w), dtype=t.dtype)
    out[:, :, 0::2, 0::2] = ll + hl + lh + hh
    out[:, :, 0::2, 1::2] = ll - hl + lh - hh
    out[:, :, 1::2, 0::2] = ll + hl - lh - hh
    out[:, :, 1::2, 1::2] = ll - hl - lh + hh
    return out


numpy_impl = types.SimpleNamespace(
    name="numpy", im2col=_im2col_np, col2im=_col2im_np,
    haar_fwd=_haar_fwd_np, haar_inv=_haar_inv_np)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _im2col_nb_core(x, k, pad, cols):
        n, c, h, w = x.shape
        ho = h + 2 * pad - k + 1
        wo = w + 2 * pad - k + 1
        hw = ho * wo
        for rc in prange(c * k * k):
            ch = rc // (k * k)
            i = (rc // k) % k
            j = rc % k
            lo = max(0, pad - j)
            hi = min(wo, w + pad - j)
            for b in range(n):
                for y in range(ho):
                    base = b * hw + y * wo
                    sy = y + i - pad
                    if sy < 0 or sy >= h:
                        for xx in range(wo):
                            cols[rc, base + xx] = 0.0
                        continue
                    for xx in range(lo):
                        cols[rc, base + xx] = 0.0
                    for xx in range(lo, hi):
                        cols[rc, base + xx] = x[b, ch, sy, xx + j - pad]
                    for xx in range(hi, wo):
                        cols[rc, base + xx] = 0.0

    @njit(cache=True, parallel=True)
    def _col2im_nb_core(cols, k, pad, out):
        n, c, h, w = out.shape
        ho = h + 2 * pad - k + 1
        wo = w + 2 * pad - k + 1
        hw = ho * wo
        # one worker per (image, channel): writes never overlap
        for bc in prange(n * c):
            b = bc // c
            ch = bc % c
            for i in range(k):
                for j in range(k):
                    rc = (ch * k + i) * k + j
                    lo = max(0, pad - j)
                    hi = min(wo, w + pad - j)
                    for y in range(ho):
                        sy = y + i - pad
                        if sy < 0 or sy >= h:
                            continue
                        base = b * hw + y * wo
                        for xx in range(lo, hi):
                            out[b, ch, sy, xx + j - pad] += cols[rc, base + xx]

    @njit(cache=True, parallel=True)
    def _haar_fwd_nb_core(x, out):
        n, c, h, w = x.shape
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for y in range(h // 2):
                for xx in range(w // 2):
                    a = x[b, ch, 2 * y, 2 * xx]
                    bb = x[b, ch, 2 * y, 2 * xx + 1]
                    cc = x[b, ch, 2 * y + 1, 2 * xx]
                    d = x[b, ch, 2 * y + 1, 2 * xx + 1]
                    out[b, ch, y, xx] = (a + bb + cc + d) * 0.25
                    out[b, c + ch, y, xx] = (a - bb + cc - d) * 0.25
                    out[b, 2 * c + ch, y, xx] = (a + bb - cc - d) * 0.25
                    out[b, 3 * c + ch, y, xx] = (a - bb - cc + d) * 0.25

    @njit(cache=True, parallel=True)
    def _haar_inv_nb_core(t, out):
        n, c, h2, w2 = out.shape
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for y in range(h2 // 2):
                for xx in range(w2 // 2):
                    ll = t[b, ch, y, xx]
                    hl = t[b, c + ch, y, xx]
                    lh = t[b, 2 * c + ch, y, xx]
                    hh = t[b, 3 * c + ch, y, xx]
                    out[b, ch, 2 * y, 2 * xx] = ll + hl + lh + hh
                    out[b, ch, 2 * y, 2 * xx + 1] = ll - hl + lh - hh
                    out[b, ch, 2 * y + 1, 2 * xx] = ll + hl - lh - hh
                    out[b, ch, 2 * y + 1, 2 * xx + 1] = ll - hl - lh + hh

    def _im2col_nb(x, k, pad):
        n, c, h, w = x.shape
        ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
        cols = np.empty((c * k * k, n * ho * wo), dtype=x.dtype)
        _im2col_nb_core(np.ascontiguousarray(x), k, pad, cols)
        return cols

    def _col2im_nb(cols, n, c, h, w, k, pad):
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        _col2im_nb_core(np.ascontiguousarray(cols), k, pad, out)
        return out

    def _haar_fwd_nb(x):
        n, c, h, w = x.shape
        out = np.empty((n, 4 * c, h // 2, w // 2), dtype=x.dtype)
        _haar_fwd_nb_core(np.ascontiguousarray(x), out)
        return out

    def _haar_inv_nb(t):
        n, c4, h, w = t.shape
        out = np.empty((n, c4 // 4, 2 * h, 2 * w), dtype=t.dtype)
        _haar_inv_nb_core(np.ascontiguousarray(t), out)
        return out

    numba_impl = types.SimpleNamespace(
        name="numba", im2col=_im2col_nb, col2im=_col2im_nb,
        haar_fwd=_haar_fwd_nb, haar_inv=_haar_inv_nb)
else:  # pragma: no cover
    numba_impl = None


def _select():
    choice = os.environ.get("HDIV_KERNELS", "").strip().lower()
    if choice == "numpy":
        return numpy_impl
    if choice == "numba":
        if numba_impl is None:
            raise ImportError("HDIV_KERNELS=numba but numba is not importable")
        return numba_impl
    if choice not in ("", "auto"):
        raise ValueError(f"HDIV_KERNELS must be 'numba' or 'numpy', got {choice!r}")
    return numba_impl if numba_impl is not None else numpy_impl


active = _select()
BACKEND = active.name


def set_threads(n: int) -> None:
    """Cap numba and BLAS worker counts (used for ``HDIV_THREADS``)."""
    n = max(1, int(n))
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(limits=n)
