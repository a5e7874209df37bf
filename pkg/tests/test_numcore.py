import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtnet.numcore import (
    AdamState,
    ConvParams,
    ShapeError,
    adam_step,
    bilinear_resize,
    bilinear_resize_backward,
    conv2d,
    conv2d_backward,
    finite_diff_check,
    l2_normalize,
    l2_normalize_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    transposed_conv2d,
    transposed_conv2d_backward,
)


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, c, y * stride + u, xx * stride + v] * w[o, c, u, v]
                    out[i, o, y, xx] = acc
    return out


def naive_tconv(x, w, b, stride, pad):
    # every input pixel stamps a weighted kernel copy onto the output
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    full = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for i in range(n):
        for c in range(cin):
            for y in range(h):
                for xx in range(wd):
                    full[i, :, y * stride : y * stride + kh, xx * stride : xx * stride + kw] += x[i, c, y, xx] * w[c]
    ho, wo = full.shape[2] - 2 * pad, full.shape[3] - 2 * pad
    return full[:, :, pad : pad + ho, pad : pad + wo] + b[None, :, None, None]


# -- conv2d -------------------------------------------------------------------


def test_conv_scalar_affine():
    p = ConvParams(np.full((1, 1, 1, 1), 3.0), np.array([1.0]))
    assert conv2d(np.full((1, 1, 1, 1), 2.0), p)[0, 0, 0, 0] == 7.0


def test_conv_stride_shape():
    p = ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1), stride=2, padding=1)
    assert conv2d(np.zeros((1, 1, 8, 8)), p).shape == (1, 1, 4, 4)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = conv2d(x, ConvParams(w, b, stride, pad))
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-6, rtol=0)


def test_conv_rectangular_kernel_and_padding(rng):
    x = rng.standard_normal((2, 3, 6, 7))
    w = rng.standard_normal((2, 3, 5, 1))
    b = rng.standard_normal(2)
    got = conv2d(x, ConvParams(w, b, 1, (2, 0)))
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (0, 0)))
    ref = naive_conv(xp, w, b, 1, 0)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 3, 4, 4)), ConvParams(np.zeros((1, 2, 3, 3)), np.zeros(1)))


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 1, 4, 4)), ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1)))


def test_conv_zero_sized_output():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 1, 2, 2)), ConvParams(np.zeros((1, 1, 5, 5)), np.zeros(1)))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-10, 10, allow_nan=False), seed=st.integers(0, 2**16))
def test_conv_linear_without_bias(a, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 2, 6, 6))
    p = ConvParams(r.standard_normal((2, 2, 3, 3)), np.zeros(2), 1, 1)
    lhs = conv2d(a * x, p)
    rhs = a * conv2d(x, p)
    scale = max(np.abs(rhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() <= 1e-6 * scale


def test_conv_backward_zero_and_bias(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    p = ConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), 2, 1)
    y = conv2d(x, p)
    gx, gp = conv2d_backward(x, p, np.zeros_like(y))
    assert not gx.any() and not gp.weight.any() and not gp.bias.any()
    g = rng.standard_normal(y.shape)
    _, gp = conv2d_backward(x, p, g)
    np.testing.assert_allclose(gp.bias, g.sum(axis=(0, 2, 3)))


def test_conv_backward_shape_mismatch(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    p = ConvParams(rng.standard_normal((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d_backward(x, p, np.zeros((1, 1, 4, 4)))


def _conv_check(x, w, b, stride, pad, tconv=False, grad_scale=1.0):
    fwd_fn, bwd_fn = (transposed_conv2d, transposed_conv2d_backward) if tconv else (conv2d, conv2d_backward)

    def fwd(d):
        return fwd_fn(d["x"], ConvParams(d["w"], d["b"], stride, pad))

    def bwd(d, g):
        gx, gp = bwd_fn(d["x"], ConvParams(d["w"], d["b"], stride, pad), g)
        return {"x": gx * grad_scale, "w": gp.weight, "b": gp.bias}

    return finite_diff_check(fwd, bwd, {"x": x, "w": w, "b": b})


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv_gradcheck(rng, stride, pad):
    rep = _conv_check(rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), stride, pad)
    assert rep.passed, rep


def test_gradcheck_detects_corruption(rng):
    rep = _conv_check(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2), 1, 1, grad_scale=2.0)
    assert not rep.passed
    assert rep.per_input["x"] > 0.3


# -- transposed conv ----------------------------------------------------------


def test_tconv_shape():
    p = ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1), stride=2, padding=0)
    assert transposed_conv2d(np.zeros((1, 1, 2, 2)), p).shape == (1, 1, 4, 4)


def test_tconv_disjoint_tiles():
    p = ConvParams(np.ones((1, 1, 2, 2)), np.array([0.5]), stride=2, padding=0)
    out = transposed_conv2d(np.ones((1, 1, 2, 2)), p)
    np.testing.assert_array_equal(out, np.full((1, 1, 4, 4), 1.5))


@pytest.mark.parametrize("k,stride,pad", [(4, 2, 1), (3, 1, 1), (2, 2, 0), (3, 2, 0)])
def test_tconv_matches_stamp_oracle(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(2)
    got = transposed_conv2d(x, ConvParams(w, b, stride, pad))
    np.testing.assert_allclose(got, naive_tconv(x, w, b, stride, pad), atol=1e-10)


@pytest.mark.parametrize("k,stride,pad", [(4, 2, 1), (3, 1, 1)])
def test_tconv_gradcheck(rng, k, stride, pad):
    rep = _conv_check(
        rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((3, 2, k, k)), rng.standard_normal(2), stride, pad, tconv=True
    )
    assert rep.passed, rep


# -- pointwise ----------------------------------------------------------------


def test_relu_values_and_subgradient():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(relu(x).ravel(), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu_backward(x, np.ones_like(x)).ravel(), [0.0, 0.0, 1.0])


def test_sigmoid_values():
    assert sigmoid(np.zeros((1, 1, 1, 1)))[0, 0, 0, 0] == 0.5
    y = sigmoid(np.zeros((1, 1, 1, 1)))
    assert sigmoid_backward(y, np.ones_like(y))[0, 0, 0, 0] == 0.25
    big = sigmoid(np.array([-800.0, 800.0]).reshape(1, 1, 1, 2))
    assert np.all(np.isfinite(big)) and big.min() >= 0 and big.max() <= 1


@given(arrays(np.float64, (1, 1, 3, 4), elements=st.floats(-50, 50)))
def test_sigmoid_symmetry(x):
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)


def test_pointwise_gradchecks(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    rep = finite_diff_check(lambda d: sigmoid(d["x"]), lambda d, g: {"x": sigmoid_backward(sigmoid(d["x"]), g)}, {"x": x})
    assert rep.passed, rep
    rep = finite_diff_check(lambda d: relu(d["x"]), lambda d, g: {"x": relu_backward(d["x"], g)}, {"x": x})
    assert rep.passed, rep


def test_l2_normalize(rng):
    x = rng.standard_normal((2, 5, 3, 3))
    y, _ = l2_normalize(x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-6)

    def bwd(d, g):
        y, n = l2_normalize(d["x"])
        return {"x": l2_normalize_backward(y, n, g)}

    rep = finite_diff_check(lambda d: l2_normalize(d["x"])[0], bwd, {"x": x})
    assert rep.passed, rep


# -- bilinear resize ----------------------------------------------------------


def test_resize_identity(rng):
    x = rng.standard_normal((1, 2, 5, 7))
    np.testing.assert_array_equal(bilinear_resize(x, 5, 7), x)


@pytest.mark.parametrize("size", [(1, 1), (3, 9), (16, 4)])
def test_resize_constant(size):
    out = bilinear_resize(np.full((1, 1, 4, 4), 0.7), *size)
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-15)


def test_resize_hand_weights():
    # half-pixel centres: source x = (x_out + 0.5) / 2 - 0.5 -> -0.25, 0.25, 0.75, 1.25, clamped
    x = np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    out = bilinear_resize(x, 4, 4)[0, 0]
    for row in out:
        np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 2, 3, 5), elements=st.floats(-5, 5)), st.integers(1, 12), st.integers(1, 12))
def test_resize_bounds(x, oh, ow):
    out = bilinear_resize(x, oh, ow)
    assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


def test_resize_gradcheck(rng):
    x = rng.standard_normal((1, 2, 3, 5))
    rep = finite_diff_check(
        lambda d: bilinear_resize(d["x"], 12, 7), lambda d, g: {"x": bilinear_resize_backward(d["x"].shape, g)}, {"x": x}
    )
    assert rep.passed, rep


# -- adam ---------------------------------------------------------------------


def test_adam_zero_grad_keeps_params():
    p = {"a": np.array([1.0, -2.0])}
    s = AdamState.for_params(p, lr=1e-3)
    new, s2 = adam_step(p, {"a": np.zeros(2)}, s)
    np.testing.assert_array_equal(new["a"], p["a"])
    assert s2.step == 1 and s.step == 0


def test_adam_first_step_hand_value():
    lr, eps = 1e-5, 1e-8
    p = {"a": np.array([0.0])}
    s = AdamState.for_params(p, lr=lr, beta1=0.9, beta2=0.999, eps=eps)
    new, _ = adam_step(p, {"a": np.array([1.0])}, s)
    delta = new["a"][0]
    # bias-corrected moments are both exactly 1 on the first step
    assert abs(delta - (-lr / (1 + eps))) <= 1e-20
    assert abs(delta + lr) <= 1e-10


def test_adam_constant_grad_second_step():
    p = {"a": np.array([0.0])}
    s = AdamState.for_params(p)
    p1, s = adam_step(p, {"a": np.array([1.0])}, s)
    p2, s = adam_step(p1, {"a": np.array([1.0])}, s)
    d1 = abs(p1["a"][0] - p["a"][0])
    d2 = abs(p2["a"][0] - p1["a"][0])
    assert d2 <= d1 * (1 + 1e-6)


def test_adam_rejects_nonfinite():
    p = {"a": np.zeros(2)}
    with pytest.raises(FloatingPointError):
        adam_step(p, {"a": np.array([np.nan, 0.0])}, AdamState.for_params(p))


def test_adam_deterministic(rng):
    p0 = {"w": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)}
    grads = [{k: rng.standard_normal(v.shape) for k, v in p0.items()} for _ in range(5)]

    def run():
        p, s = dict(p0), AdamState.for_params(p0, lr=1e-2)
        for g in grads:
            p, s = adam_step(p, g, s)
        return p

    a, b = run(), run()
    for k in p0:
        np.testing.assert_array_equal(a[k], b[k])
