import numpy as np
import pytest

from hdiv import tensor as T
from hdiv.pyramid import ModelConfig, PyramidModel

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model(levels=1, blocks=1, subnet="RB", growth=4, dtype="f64", seed=0, randomize=True,
                channels=3, noise_fraction=0.4):
    cfg = ModelConfig(levels=levels, blocks=blocks, subnet=subnet, growth=growth, dtype=dtype,
                      channels=channels, noise_fraction=noise_fraction)
    m = PyramidModel.create(cfg, seed=seed)
    if randomize:
        m.randomize(seed)
    return m


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def haar_oracle(x):
    """Per-element Haar analysis (/4), written out independently of the package."""
    n, c, h, w = x.shape
    out = np.zeros((n, 4 * c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            a = x[:, :, 2 * i, 2 * j]
            b = x[:, :, 2 * i, 2 * j + 1]
            cc = x[:, :, 2 * i + 1, 2 * j]
            d = x[:, :, 2 * i + 1, 2 * j + 1]
            out[:, 0:c, i, j] = (a + b + cc + d) / 4
            out[:, c:2 * c, i, j] = (a - b + cc - d) / 4
            out[:, 2 * c:3 * c, i, j] = (a + b - cc - d) / 4
            out[:, 3 * c:, i, j] = (a - b - cc + d) / 4
    return out


def ihaar_oracle(t):
    n, c4, h, w = t.shape
    c = c4 // 4
    ll, hl, lh, hh = t[:, :c], t[:, c:2 * c], t[:, 2 * c:3 * c], t[:, 3 * c:]
    x = np.zeros((n, c, 2 * h, 2 * w))
    x[:, :, 0::2, 0::2] = ll + hl + lh + hh
    x[:, :, 0::2, 1::2] = ll - hl + lh - hh
    x[:, :, 1::2, 0::2] = ll + hl - lh - hh
    x[:, :, 1::2, 1::2] = ll - hl - lh + hh
    return x


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
