"""Compare the numba and numpy kernel backends.

Run: python benchmarks/bench_kernels.py [--repeat N]

Times im2col, col2im and both Haar directions at training-sized shapes, then
one full training step (forward, backward, Adam) of the desk-scale model.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from hdiv import _kernels
from hdiv import tensor as T
from hdiv.data import make_guides
from hdiv.losses import LossWeights
from hdiv.optim import AdamState, adam_step, compute_losses
from hdiv.pyramid import ModelConfig, PyramidModel


def best_of(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    x = rng.standard_normal((4, 19, 32, 32)).astype(np.float32)
    cols = rng.standard_normal((19 * 9, 4 * 32 * 32)).astype(np.float32)
    img = rng.standard_normal((4, 9, 64, 64)).astype(np.float32)
    bands = rng.standard_normal((4, 36, 32, 32)).astype(np.float32)
    return {
        "im2col 4x19x32x32": lambda k: k.im2col(x, 3, 1),
        "col2im 4x19x32x32": lambda k: k.col2im(cols, 4, 19, 32, 32, 3, 1),
        "haar_fwd 4x9x64x64": lambda k: k.haar_fwd(img),
        "haar_inv 4x36x32x32": lambda k: k.haar_inv(bands),
    }


def train_step_fn(rng):
    model = PyramidModel.create(ModelConfig(levels=2, blocks=2, subnet="RB"))
    clean = rng.random((4, 3, 64, 64)).astype(np.float32)
    noisy = (clean + 0.1 * rng.standard_normal(clean.shape)).astype(np.float32)
    state = AdamState()

    def step():
        model.params.zero_grad()
        parts = compute_losses(model, clean, noisy, LossWeights())
        T.backward(parts["total"])
        adam_step(state, model.params, model.params.grads(), 1e-4)

    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = [b for b in (_kernels.numpy_impl, _kernels.numba_impl) if b is not None]
    rng = np.random.default_rng(0)
    print(f"{'case':24s}" + "".join(f"{b.name:>12s}" for b in backends) + "   speedup")
    for name, fn in kernel_cases(rng).items():
        t = [best_of(lambda: fn(b), args.repeat) for b in backends]
        print(f"{name:24s}" + "".join(f"{v * 1e3:10.3f}ms" for v in t) + f"   {t[0] / t[-1]:6.2f}x")

    saved = _kernels.active
    t = []
    for b in backends:
        _kernels.active = b
        t.append(best_of(train_step_fn(np.random.default_rng(1)), max(3, args.repeat // 4)))
    _kernels.active = saved
    print(f"{'train step (L2 B2 RB)':24s}" + "".join(f"{v * 1e3:10.3f}ms" for v in t) + f"   {t[0] / t[-1]:6.2f}x")


if __name__ == "__main__":
    main()
