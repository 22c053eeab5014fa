import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaseg import tensor as T
from metaseg.errors import ContractError, LabelRangeError, NumericError, ShapeError
from metaseg.gradcheck import MODEL_CASE, OP_CASES, _case


def const_graph(*arrays):
    g = T.Graph()
    return g, [g.param(f"p{i}", a) for i, a in enumerate(arrays)]


# -- conv2d --------------------------------------------------------------------

def test_conv_identity_kernel_returns_input(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    g, (xv, wv, bv) = const_graph(x, w, np.zeros(3))
    out = T.conv2d(xv, wv, bv).value
    assert np.array_equal(out, x)


def test_conv_zero_padding_counts():
    g, (x, w, b) = const_graph(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    out = T.conv2d(x, w, b).value[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
    assert out[0, 1] == 6


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 2, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    g, (xv, wv, bv) = const_graph(x, w, b)
    out = T.conv2d(xv, wv, bv).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(3):
            for r in range(4):
                for c in range(5):
                    ref[n, o, r, c] = np.sum(xp[n, :, r:r + 3, c:c + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("xs, ws, bs", [
    ((1, 2, 4, 4), (3, 3, 3, 3), (3,)),
    ((1, 2, 4, 4), (3, 2, 2, 2), (3,)),
    ((1, 2, 4, 4), (3, 2, 3, 3), (4,)),
    ((2, 4, 4), (3, 2, 3, 3), (3,)),
])
def test_conv_shape_errors(xs, ws, bs):
    g, (x, w, b) = const_graph(np.zeros(xs), np.zeros(ws), np.zeros(bs))
    with pytest.raises(ShapeError):
        T.conv2d(x, w, b)


def test_conv_error_names_dimensions():
    g, (x, w, b) = const_graph(np.zeros((1, 2, 4, 4)), np.zeros((3, 5, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError, match="2 != weight input channels 5"):
        T.conv2d(x, w, b)


# -- relu / pool / upsample / concat ---------------------------------------------

def test_relu_values_and_gradient():
    g = T.Graph()
    x = g.param("x", np.array([-1.0, 2.0, 3.0, 0.0]))
    y = T.relu(x)
    assert y.value.tolist() == [0.0, 2.0, 3.0, 0.0]
    grads = T.backward(g, T.sum_all(y))
    assert grads["x"].tolist() == [0.0, 1.0, 1.0, 0.0]


def test_maxpool_value_and_gradient_routing():
    g = T.Graph()
    x = g.param("x", np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    y = T.maxpool2(x)
    assert y.value.tolist() == [[[[4.0]]]]
    grads = T.backward(g, T.sum_all(T.scale(y, 5.0)))
    assert grads["x"].tolist() == [[[[0.0, 0.0], [0.0, 5.0]]]]


def test_maxpool_ties_go_to_first_in_row_major_order():
    g = T.Graph()
    x = g.param("x", np.array([[[[0.0, 7.0], [7.0, 7.0]]]]))
    grads = T.backward(g, T.sum_all(T.maxpool2(x)))
    assert grads["x"].tolist() == [[[[0.0, 1.0], [0.0, 0.0]]]]


def test_maxpool_rejects_odd_dims():
    g, (x,) = const_graph(np.zeros((1, 1, 3, 4)))
    with pytest.raises(ShapeError):
        T.maxpool2(x)


def test_upsample_replicates_blocks():
    g, (x,) = const_graph(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = T.upsample2(x).value[0, 0]
    assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_upsample_backward_sums_blocks():
    g = T.Graph()
    x = g.param("x", np.array([[[[1.0, 2.0]]]]))
    proj = np.arange(8.0).reshape(1, 1, 2, 4)
    grads = T.backward(g, T.sum_all(T.mul(T.upsample2(x), proj)))
    assert grads["x"].tolist() == [[[[0 + 1 + 4 + 5, 2 + 3 + 6 + 7]]]]


def test_upsample_then_maxpool_is_identity(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    g, (xv,) = const_graph(x)
    assert np.array_equal(T.maxpool2(T.upsample2(xv)).value, x)


def test_concat_shapes_and_slicing_roundtrip(rng):
    a, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 4, 4))
    g, (av, bv) = const_graph(a, b)
    out = T.concat_channels(av, bv).value
    assert out.shape == (1, 5, 4, 4)
    assert np.array_equal(out[:, :2], a) and np.array_equal(out[:, 2:], b)


def test_concat_spatial_mismatch():
    g, (a, b) = const_graph(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 2)))
    with pytest.raises(ShapeError):
        T.concat_channels(a, b)


# -- softmax cross-entropy -------------------------------------------------------

@pytest.mark.parametrize("k", range(2, 9))
def test_softmax_ce_uniform_logits_is_log_k(k):
    g, (z,) = const_graph(np.full((2, k, 3, 3), 0.37))
    loss = T.softmax_ce(z, np.zeros((2, 3, 3), dtype=np.int64))
    assert abs(float(loss.value) - math.log(k)) < 1e-6


def test_softmax_ce_uniform_k4_value():
    g, (z,) = const_graph(np.zeros((1, 4, 2, 2)))
    loss = float(T.softmax_ce(z, np.ones((1, 2, 2), dtype=np.int64)).value)
    assert loss == pytest.approx(1.386294, abs=1e-6)


def test_softmax_ce_is_stable_for_huge_logits(rng):
    target = rng.integers(0, 3, size=(2, 4, 4))
    z = np.zeros((2, 3, 4, 4))
    np.put_along_axis(z, target[:, None], 1000.0, axis=1)
    g, (zv,) = const_graph(z)
    loss = T.softmax_ce(zv, target)
    assert np.isfinite(loss.value) and float(loss.value) < 1e-6


def test_softmax_ce_gradient_matches_closed_form(rng):
    z = rng.standard_normal((2, 5, 3, 4))
    target = rng.integers(0, 5, size=(2, 3, 4))
    g = T.Graph()
    zv = g.param("z", z)
    grads = T.backward(g, T.softmax_ce(zv, target))
    # closed form computed independently, pixel by pixel
    expected = np.zeros_like(z)
    n_pix = 2 * 3 * 4
    for b in range(2):
        for r in range(3):
            for c in range(4):
                e = np.exp(z[b, :, r, c] - z[b, :, r, c].max())
                p = e / e.sum()
                p[target[b, r, c]] -= 1.0
                expected[b, :, r, c] = p / n_pix
    assert np.max(np.abs(grads["z"] - expected)) < 1e-10


def test_softmax_ce_label_range_error_names_pixels():
    g, (z,) = const_graph(np.zeros((1, 3, 2, 2)))
    target = np.array([[[0, 1], [2, 3]]])
    with pytest.raises(LabelRangeError, match=r"\(0, 1, 1\)"):
        T.softmax_ce(z, target)


# -- backward --------------------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    g = T.Graph()
    x = g.param("x", rng.standard_normal((2, 3, 4)))
    assert np.array_equal(T.backward(g, T.sum_all(x))["x"], np.ones((2, 3, 4)))


def test_backward_of_sum_relu():
    g = T.Graph()
    x = g.param("x", np.array([-1.0, 2.0]))
    assert T.backward(g, T.sum_all(T.relu(x)))["x"].tolist() == [0.0, 1.0]


def test_backward_rejects_non_scalar_root():
    g = T.Graph()
    x = g.param("x", np.ones(3))
    with pytest.raises(ContractError):
        T.backward(g, T.relu(x))


def test_backward_unknown_parameter():
    g = T.Graph()
    x = g.param("x", np.ones(3))
    with pytest.raises(KeyError):
        T.backward(g, T.sum_all(x), ["y"])


def test_backward_keys_and_unused_parameters():
    g = T.Graph()
    x = g.param("x", np.ones(3))
    g.param("unused", np.ones(2))
    g.param("frozen", np.ones(3), requires_grad=False)
    grads = T.backward(g, T.sum_all(x))
    assert set(grads) == {"x", "unused"}
    assert np.array_equal(grads["unused"], np.zeros(2))


def test_backward_is_bitwise_repeatable():
    point, fn = _case(MODEL_CASE, 3)
    g = T.Graph()
    root = fn(g, {k: g.param(k, v) for k, v in point.items()})
    first = T.backward(g, root)
    second = T.backward(g, root)
    assert all(first[k].tobytes() == second[k].tobytes() for k in first)


def test_shared_input_accumulates():
    g = T.Graph()
    x = g.param("x", np.array([3.0, -2.0]))
    grads = T.backward(g, T.sum_all(T.mul(x, x)))
    assert grads["x"].tolist() == [6.0, -4.0]


def test_non_finite_values_raise():
    g, (x, w, b) = const_graph(np.array([[[[np.inf]]]]), np.ones((1, 1, 1, 1)), np.zeros(1))
    with pytest.raises(NumericError):
        T.conv2d(x, w, b)


# -- grad_check ------------------------------------------------------------------

def test_grad_check_quadratic():
    err = T.grad_check(lambda g, v: T.sum_all(T.mul(v["w"], v["w"])), {"w": np.array([3.0])}, 1e-6)
    assert err < 1e-9


def test_grad_check_linear_is_machine_precision():
    c = np.array([0.5, -2.0, 7.0])
    err = T.grad_check(lambda g, v: T.sum_all(T.mul(v["w"], c)), {"w": np.array([1.0, 2.0, 3.0])})
    assert err < 1e-10


def test_grad_check_detects_a_wrong_gradient():
    def broken(g, v):
        x = v["x"]
        value = x.value * 2.0
        return T.sum_all(g.record("bad", (x,), value, lambda grad, needs: (grad * 3.0,)))

    assert T.grad_check(broken, {"x": np.ones(3)}) > 0.1


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        T.grad_check(lambda g, v: T.sum_all(v["w"]), {"w": np.ones(1)}, eps=0.0)


@pytest.mark.parametrize("name", OP_CASES)
@pytest.mark.parametrize("seed", range(10))
def test_op_gradients_f64(name, seed):
    point, fn = _case(name, seed)
    assert T.grad_check(fn, point, 1e-6) < 1e-5


@pytest.mark.parametrize("name", OP_CASES)
@pytest.mark.parametrize("seed", range(10))
def test_op_gradients_f32(name, seed):
    point, fn = _case(name, seed)
    point = {k: v.astype(np.float32) for k, v in point.items()}
    assert T.grad_check(fn, point, 1e-6) < 5e-2


@pytest.mark.slow
def test_mini_unet_full_parameter_sweep():
    point, fn = _case(MODEL_CASE, 0)
    assert T.grad_check(fn, point, 1e-6) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1.0, 1e3))
def test_no_overflow_within_1e3(seed, scale):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-scale, scale, size=(1, 2, 4, 4))
    g = T.Graph()
    xv = g.param("x", x)
    w = g.param("w", rng.uniform(-1, 1, size=(3, 2, 3, 3)))
    b = g.param("b", rng.uniform(-1, 1, size=3))
    h = T.relu(T.conv2d(xv, w, b))
    h = T.upsample2(T.maxpool2(h))
    loss = T.softmax_ce(h, rng.integers(0, 3, size=(1, 4, 4)))
    grads = T.backward(g, loss)
    assert np.isfinite(loss.value)
    assert all(np.all(np.isfinite(v)) for v in grads.values())


def test_default_precision_env(monkeypatch):
    from metaseg.errors import ConfigError

    monkeypatch.setenv(T.PRECISION_ENV, "f64")
    assert T.default_dtype() is np.float64
    monkeypatch.setenv(T.PRECISION_ENV, "f32")
    assert T.default_dtype() is np.float32
    monkeypatch.setenv(T.PRECISION_ENV, "f16")
    with pytest.raises(ConfigError):
        T.default_dtype()
