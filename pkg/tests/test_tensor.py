import math

import numpy as np
import pytest

from hdiv import tensor as T
from hdiv.tensor import NonFiniteError, ParamStore, ShapeError, Tensor

from conftest import rel_err


def conv_oracle(x, w, b, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, ic, i + di, j + dj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


def test_scalar_values():
    assert T.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5] * 3
    assert T.exp(Tensor(np.zeros(2))).data.tolist() == [1.0, 1.0]
    np.testing.assert_allclose(T.leaky_relu(Tensor(np.array([-2.0, 3.0])), 0.2).data, [-0.4, 3.0])


def test_sigmoid_is_stable():
    out = T.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data
    np.testing.assert_array_equal(out, x)


def test_conv_zero_weights_give_bias(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    out = T.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.array([1.0, -2.0, 0.5]))).data
    for oc, v in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out[:, oc] == v)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_conv_matches_loop_oracle(rng, dtype, tol):
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x.astype(dtype)), Tensor(w.astype(dtype)), Tensor(b.astype(dtype))).data
    assert out.shape == (2, 4, 5, 4) and out.dtype == dtype
    np.testing.assert_allclose(out, conv_oracle(x, w, b, 1), atol=tol, rtol=tol)


def test_conv_shape_errors(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(2)))


def test_concat_split_round_trip(rng):
    parts = [Tensor(rng.standard_normal((2, c, 3, 3))) for c in (1, 4, 2)]
    cat = T.concat_channels(parts)
    assert cat.shape == (2, 7, 3, 3)
    for p, q in zip(parts, T.split_channels(cat, [1, 4, 2])):
        np.testing.assert_array_equal(p.data, q.data)
    with pytest.raises(ShapeError):
        T.split_channels(cat, [3, 3])


def test_sum_over_concat_has_unit_gradient(rng):
    parts = [Tensor(rng.standard_normal((1, c, 2, 2)), requires_grad=True) for c in (2, 3)]
    T.backward(T.sum_(T.concat_channels(parts)))
    for p in parts:
        np.testing.assert_array_equal(p.grad, np.ones(p.shape))


def test_simple_backward():
    p = Tensor(np.array([3.0]), requires_grad=True)
    T.backward(T.sum_(T.square(p)))
    assert p.grad.tolist() == [6.0]
    q = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    T.backward(T.sum_(T.exp(q)))
    assert q.grad.tolist() == [1.0, 1.0]


def test_shared_input_accumulates():
    p = Tensor(np.array([2.0]), requires_grad=True)
    T.backward(T.sum_(T.mul(p, p) + p))
    assert p.grad.tolist() == [5.0]


def _fd_check(loss, params, rng, n=12, tol=1e-6):
    for a, num in T.gradient_check(loss, params, n, rng, h=1e-6):
        assert rel_err(a, num, 1e-6) <= tol, (a, num)


UNARY = {
    "exp": lambda a: T.exp(a),
    "log": lambda a: T.log(T.shift(T.square(a), 0.5)),
    "square": T.square,
    "abs": T.abs_,
    "leaky_relu": lambda a: T.leaky_relu(a, 0.2),
    "sigmoid": T.sigmoid,
    "clamp_min": lambda a: T.clamp_min(a, 0.1),
    "scale_shift": lambda a: T.shift(T.scale(a, -1.7), 0.3),
    "neg": T.neg,
    "channel_mean": T.channel_mean,
    "reshape": lambda a: T.reshape(a, (2, -1)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(rng, name):
    a = Tensor(rng.standard_normal((2, 3, 2, 2)) + 0.05, requires_grad=True)
    w = Tensor(rng.standard_normal(UNARY[name](a).shape))
    _fd_check(lambda: T.sum_(T.mul(UNARY[name](a), w)), [a], rng, tol=1e-5)


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_binary_gradients(rng, name):
    a = Tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3)))
    _fd_check(lambda: T.sum_(T.mul(T.elementwise(name, a, b), w)), [a, b], rng)


def test_mean_and_split_gradients(rng):
    a = Tensor(rng.standard_normal((2, 5, 2, 2)), requires_grad=True)

    def loss():
        s1, s2 = T.split_channels(a, [2, 3])
        return T.add(T.mean(T.square(s1)), T.mean(T.exp(s2)))

    _fd_check(loss, [a], rng)


def test_conv_gradients(rng):
    x = Tensor(rng.standard_normal((2, 2, 4, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    tgt = Tensor(rng.standard_normal((2, 3, 4, 5)))
    _fd_check(lambda: T.sum_(T.mul(T.conv2d(x, w, b), tgt)), [x, w, b], rng, n=30)


def test_no_broadcasting(rng):
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1000.0])))
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0])))


def test_backward_needs_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.square(a))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.sum_(T.square(a))
    assert not out.requires_grad
    assert T.grad_enabled()


def test_elementwise_unknown_kind():
    with pytest.raises(ValueError):
        T.elementwise("tanh", Tensor(np.ones(2)))


def test_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w)).data
    b = T.conv2d(Tensor(x), Tensor(w)).data
    assert a.tobytes() == b.tobytes()


def test_param_store():
    ps = ParamStore()
    ps.add("b", np.zeros(2))
    ps.add("a", np.ones((2, 2)))
    assert list(ps) == ["b", "a"] and ps.numel() == 6
    assert all(p.requires_grad for p in ps.values())
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(1))
    st = ps.state()
    st["a"] = st["a"] * 3
    ps.load_state(st)
    assert ps["a"].data.sum() == 12
    with pytest.raises(KeyError):
        ps.load_state({"a": st["a"], "b": st["b"]})
    with pytest.raises(ShapeError):
        ps.load_state({"b": np.zeros(3), "a": st["a"]})
    assert math.isclose(float(ps.grads()["b"].sum()), 0.0)


def test_concat_ignores_later_list_mutation(rng):
    feats = [Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)]
    cat = T.concat_channels(feats)
    feats.append(Tensor(np.ones((1, 3, 2, 2))))
    T.backward(T.sum_(cat))
    np.testing.assert_array_equal(feats[0].grad, np.ones((1, 2, 2, 2)))
