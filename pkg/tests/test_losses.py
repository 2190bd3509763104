import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hdiv import tensor as T
from hdiv.losses import LossWeights, dist_loss, guide_loss, recon_loss, total_loss
from hdiv.tensor import ShapeError, Tensor


def standardized(rng, shape, mean=0.0, var=1.0):
    x = rng.standard_normal(shape)
    axes = (0, 2, 3)
    x = (x - x.mean(axis=axes, keepdims=True)) / x.std(axis=axes, keepdims=True)
    return x * math.sqrt(var) + mean


def guide_oracle(bands, guides):
    total = 0.0
    for b, g in zip(bands, guides):
        acc, cnt = 0.0, 0
        for idx in np.ndindex(b.shape):
            acc += (b[idx] - g[idx]) ** 2
            cnt += 1
        total += acc / cnt
    return total


def recon_oracle(x, y):
    acc = 0.0
    for idx in np.ndindex(x.shape):
        acc += abs(x[idx] - y[idx])
    return acc / x.size


def test_dist_standard_normal_is_zero(rng):
    assert abs(float(dist_loss(Tensor(standardized(rng, (4, 5, 8, 8)))).data)) < 1e-12


def test_dist_unit_mean():
    assert math.isclose(float(dist_loss(Tensor(standardized(np.random.default_rng(0), (2, 3, 8, 8), 1.0))).data),
                        0.5, rel_tol=1e-10)


def test_dist_variance_e():
    val = float(dist_loss(Tensor(standardized(np.random.default_rng(1), (2, 3, 8, 8), 0.0, math.e))).data)
    assert math.isclose(val, (math.e - 2) / 2, rel_tol=1e-10)


def test_dist_variance_floor():
    val = float(dist_loss(Tensor(np.zeros((1, 2, 4, 4)))).data)
    assert math.isclose(val, 0.5 * (1e-6 - math.log(1e-6) - 1), rel_tol=1e-9)


def test_dist_is_channel_average(rng):
    a = standardized(rng, (2, 1, 6, 6), 1.0)
    b = standardized(rng, (2, 1, 6, 6), 0.0, math.e)
    both = float(dist_loss(Tensor(np.concatenate([a, b], axis=1))).data)
    assert math.isclose(both, (0.5 + (math.e - 2) / 2) / 2, rel_tol=1e-10)


def test_dist_permutation_invariant(rng):
    x = rng.standard_normal((3, 4, 5, 5)) * 2 + 1
    perm = x[:, ::-1]
    assert math.isclose(float(dist_loss(Tensor(x)).data), float(dist_loss(Tensor(perm)).data), rel_tol=1e-12)


def test_dist_needs_two_samples():
    with pytest.raises(ShapeError):
        dist_loss(Tensor(np.zeros((1, 3, 1, 1))))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 3, 3), elements=st.floats(-50, 50, allow_nan=False)))
def test_dist_non_negative(x):
    assert float(dist_loss(Tensor(x)).data) >= -1e-12


def test_guide_values(rng):
    b = rng.random((2, 3, 4, 4))
    assert float(guide_loss([Tensor(b)], [b]).data) == 0.0
    assert math.isclose(float(guide_loss([Tensor(b + 0.5)], [b]).data), 0.25, rel_tol=1e-12)


def test_guide_matches_loop_oracle(rng):
    bands = [rng.random((2, 3, 8, 8)), rng.random((2, 3, 4, 4))]
    guides = [rng.random((2, 3, 8, 8)), rng.random((2, 3, 4, 4))]
    val = float(guide_loss([Tensor(b) for b in bands], guides).data)
    assert abs(val - guide_oracle(bands, guides)) <= 1e-6


def test_guide_shape_checks(rng):
    with pytest.raises(ShapeError):
        guide_loss([Tensor(np.zeros((1, 3, 4, 4)))], [np.zeros((1, 3, 2, 2))])
    with pytest.raises(ShapeError):
        guide_loss([Tensor(np.zeros((1, 3, 4, 4)))], [])


def test_recon_values(rng):
    x = rng.random((2, 3, 8, 8))
    assert float(recon_loss(x, Tensor(x)).data) == 0.0
    assert math.isclose(float(recon_loss(x, Tensor(x + 0.2)).data), 0.2, rel_tol=1e-12)
    y = rng.random((2, 3, 8, 8))
    assert abs(float(recon_loss(x, Tensor(y)).data) - recon_oracle(x, y)) <= 1e-6
    with pytest.raises(ShapeError):
        recon_loss(x, Tensor(y[:, :2]))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 3, 4, 4), elements=st.floats(-5, 5)),
       arrays(np.float64, (1, 3, 4, 4), elements=st.floats(-5, 5)))
def test_losses_non_negative(a, b):
    assert float(recon_loss(a, Tensor(b)).data) >= 0
    assert float(guide_loss([Tensor(a)], [b]).data) >= 0


def _s(v):
    return Tensor(np.array(v))


def test_total_weighting():
    out = total_loss(_s(0.1), _s(0.05), _s(0.2), LossWeights())
    assert math.isclose(float(out.data), 0.5, rel_tol=1e-12)
    assert float(total_loss(_s(0.0), _s(0.0), _s(0.0), LossWeights()).data) == 0.0
    assert math.isclose(float(total_loss(_s(0.1), _s(9.0), _s(0.2), LossWeights(guide=0.0)).data), 0.3)
    with pytest.raises(ValueError):
        LossWeights(recon=-1)


def test_total_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        total_loss(_s(float("nan")), _s(0.0), _s(0.0), LossWeights())


def test_total_gradient_weights(rng):
    a = Tensor(np.array(0.3), requires_grad=True)
    b = Tensor(np.array(0.3), requires_grad=True)
    c = Tensor(np.array(0.3), requires_grad=True)
    T.backward(total_loss(a, b, c, LossWeights(recon=1, guide=4, dist=1)))
    assert (float(a.grad), float(b.grad), float(c.grad)) == (1.0, 4.0, 1.0)
