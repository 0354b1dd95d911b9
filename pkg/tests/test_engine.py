import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interpfool import engine as E
from interpfool.engine import Tensor


def leaf(a, name=None):
    return E.tensor(np.asarray(a, dtype=np.float64), name=name)


# ---------------------------------------------------------------------------
# forward values


def test_relu_forward():
    assert E.relu(leaf([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_conv2d_all_ones():
    x = leaf(np.ones((1, 1, 2, 2)))
    w = leaf(np.ones((1, 1, 2, 2)))
    out = E.conv2d(x, w, stride=1, pad=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 4.0


def test_softmax_ce_uniform():
    loss = E.softmax_cross_entropy(leaf([[0.0, 0.0]]), [0])
    assert loss.data.item() == pytest.approx(math.log(2))


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        out = E.conv2d(leaf(x), leaf(w), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (x.shape[2] + 2 * pad - 3) // stride + 1
        wo = (x.shape[3] + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = (patch * w[o]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_maxpool_first_index_wins_ties():
    x = leaf(np.array([[[[1.0, 1.0], [0.0, 1.0]]]]))
    out = E.maxpool2d(x, 2)
    assert out.data.item() == 1.0
    (g,) = [E.backward(E.sum_(out), [x])[x]]
    assert g[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_crops_remainder():
    x = leaf(np.arange(25.0).reshape(1, 1, 5, 5))
    out = E.maxpool2d(x, 2)
    assert out.data[0, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]


def test_avgpool_and_gap():
    x = leaf(np.arange(16.0).reshape(1, 1, 4, 4))
    assert E.avgpool2d(x, 2).data[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
    assert E.global_avg_pool(x).data.tolist() == [[7.5]]


def test_nearest_upsample():
    x = leaf([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = E.nearest_upsample(x, 2).data[0, 0]
    assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_shape_mismatch_names_primitive():
    with pytest.raises(E.ShapeError, match="matmul"):
        E.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))
    with pytest.raises(E.ShapeError, match="conv2d"):
        E.conv2d(leaf(np.ones((1, 2, 4, 4))), leaf(np.ones((1, 3, 3, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(E.NonFiniteError):
        leaf([1.0, np.nan])
    with pytest.raises(E.NonFiniteError):
        E.log(leaf([0.0]))


def test_primitive_forward_dispatch():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    assert E.primitive_forward("add", [a, b]).data.tolist() == [4.0, 6.0]
    out = E.primitive_forward("conv2d", [leaf(np.ones((1, 1, 2, 2))), leaf(np.ones((1, 1, 2, 2)))],
                              {"stride": 1, "pad": 0})
    assert out.data.item() == 4.0
    with pytest.raises(ValueError, match="frobnicate"):
        E.primitive_forward("frobnicate", [a])


# ---------------------------------------------------------------------------
# gradients


def test_square_gradient():
    x = leaf(3.0)
    assert E.backward(E.square(x), [x])[x] == pytest.approx(6.0)


def test_inactive_relu_gradient():
    x = leaf(-1.0)
    assert E.backward(E.relu(x), [x])[x] == 0.0


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(E.ShapeError):
        E.backward(x * 2.0, [x])


def test_unreachable_leaf_gets_zero():
    x, y = leaf([1.0, 2.0]), leaf([5.0])
    g = E.backward(E.sum_(x * x), [x, y])
    assert g[y].tolist() == [0.0]
    assert set(g) == {x, y}


def test_grad_as_graph_second_derivative():
    x = leaf(3.0)
    (g,) = E.grad_as_graph(E.square(x), [x])
    assert g.data.item() == pytest.approx(6.0)
    assert E.backward(g, [x])[x] == pytest.approx(2.0)


def test_grad_as_graph_linear():
    x = leaf([0.3, 0.7])
    w = E.constant(np.array([1.0, -2.0]))
    (g,) = E.grad_as_graph(E.sum_(w * x), [x])
    assert g.data.tolist() == [1.0, -2.0]


def test_grad_as_graph_requires_recording():
    x = leaf(2.0)
    y = E.square(x)
    with E.no_record():
        with pytest.raises(RuntimeError, match="recording"):
            E.grad_as_graph(y, [x])


def test_grad_as_graph_rejects_numeric_only_primitive():
    x = leaf([[0.1, 0.2]])
    with pytest.raises(E.NotGraphDifferentiable, match="softmax_cross_entropy"):
        E.grad_as_graph(E.softmax_cross_entropy(x, [1]), [x])


def test_relu_mask_second_derivative_is_zero():
    x = leaf([-0.5, 1.5])
    (g,) = E.grad_as_graph(E.sum_(E.relu(x)), [x])
    assert g.data.tolist() == [0.0, 1.0]
    assert E.backward(E.sum_(g * g), [x])[x].tolist() == [0.0, 0.0]


def test_detach_law():
    x = leaf([1.0, 2.0])
    y = (x * 3.0).detach()
    loss = E.sum_(y * x)
    g = E.backward(loss, [x])[x]
    np.testing.assert_array_equal(g, [3.0, 6.0])  # only the direct path contributes


def test_deterministic_evaluation():
    rng = np.random.default_rng(1)
    x, w = leaf(rng.normal(size=(2, 3, 8, 8))), leaf(rng.normal(size=(5, 3, 3, 3)))
    a = E.sum_(E.maxpool2d(E.relu(E.conv2d(x, w, 1, 1)), 2)).data
    b = E.sum_(E.maxpool2d(E.relu(E.conv2d(x, w, 1, 1)), 2)).data
    assert a.tobytes() == b.tobytes()


def _net_loss(params, x, labels):
    h = E.relu(E.conv2d(x, params["w1"], 2, 1))
    h = E.maxpool2d(h, 2)
    h = E.reshape(h, (h.shape[0], -1))
    logits = E.matmul(h, params["w2"]) + params["b2"]
    return E.softmax_cross_entropy(logits, labels)


def test_finite_diff_small_cnn():
    rng = np.random.default_rng(2)
    params = {"w1": leaf(rng.normal(size=(4, 2, 3, 3)), "w1"),
              "w2": leaf(rng.normal(size=(16, 3)) * 0.3, "w2"),
              "b2": leaf(rng.normal(size=(3,)), "b2")}
    x = E.constant(rng.normal(size=(3, 2, 8, 8)))
    err = E.finite_diff_check(lambda p: _net_loss(p, x, [0, 1, 2]), params)
    assert err <= 1e-5


def test_finite_diff_sum_of_squares():
    p = {"a": leaf(np.random.default_rng(3).normal(size=(5,)), "a")}
    assert E.finite_diff_check(lambda q: E.sum_(E.square(q["a"])), p) <= 1e-6


def test_finite_diff_constant_function():
    p = {"a": leaf([1.0, 2.0], "a")}
    assert E.finite_diff_check(lambda q: E.sum_(q["a"] * 0.0) + 5.0, p) == 0.0


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        E.finite_diff_check(lambda q: E.sum_(q["a"]), {"a": leaf([1.0], "a")}, eps=0)


def test_finite_diff_random_mlp():
    rng = np.random.default_rng(4)
    params = {"w1": leaf(rng.normal(size=(6, 8)), "w1"), "b1": leaf(rng.normal(size=(8,)), "b1"),
              "w2": leaf(rng.normal(size=(8, 4)), "w2")}
    x = E.constant(rng.normal(size=(5, 6)))

    def fn(p):
        h = E.relu(E.matmul(x, p["w1"]) + p["b1"])
        return E.softmax_cross_entropy(E.matmul(h, p["w2"]), [0, 1, 2, 3, 0])

    assert E.finite_diff_check(fn, params) <= 1e-5


def test_double_backprop_penalty_matches_finite_differences():
    # penalty on an input gradient: d/dw of ||d score / d x||^2
    rng = np.random.default_rng(5)
    params = {"w1": leaf(rng.normal(size=(3, 1, 3, 3)), "w1"), "w2": leaf(rng.normal(size=(3, 2)), "w2")}
    xv = rng.normal(size=(2, 1, 6, 6))

    def fn(p):
        x = E.tensor(xv)
        h = E.maxpool2d(E.relu(E.conv2d(x, p["w1"], 1, 1)), 2)
        score = E.sum_(E.matmul(E.mean(h, axis=(2, 3)), p["w2"]))
        (gx,) = E.grad_as_graph(score, [x])
        return E.sum_(E.square(gx)) + E.sum_(E.abs_(gx))

    assert E.finite_diff_check(fn, params) <= 1e-5


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "abs", "square", "div", "amax", "avgpool", "upsample",
                                "slice", "concat", "transpose", "broadcast"])
def test_primitive_gradients(op):
    rng = np.random.default_rng(6)
    a = leaf(rng.uniform(0.5, 2.0, size=(2, 3, 4, 4)), "a")
    b = leaf(rng.uniform(0.5, 2.0, size=(2, 3, 4, 4)), "b")
    c = E.constant(rng.normal(size=(2, 3, 4, 4)))
    c6 = E.constant(rng.normal(size=(2, 6, 4, 4)))

    def f(p):
        x, y = p["a"], p["b"]
        if op == "exp":
            z = E.exp(x)
        elif op == "log":
            z = E.log(x)
        elif op == "sqrt":
            z = E.sqrt(x)
        elif op == "abs":
            z = E.abs_(x - y)
        elif op == "square":
            z = E.square(x - y)
        elif op == "div":
            z = x / y
        elif op == "amax":
            return E.sum_(E.amax(x * y, axis=(2, 3)) * E.constant(np.arange(6.0).reshape(2, 3)))
        elif op == "avgpool":
            return E.sum_(E.avgpool2d(x * y, 2) * E.constant(np.arange(24.0).reshape(2, 3, 2, 2)))
        elif op == "upsample":
            z = E.nearest_upsample(E.avgpool2d(x, 2), 2) * y
        elif op == "slice":
            return E.sum_(E.slice_(x * y, (slice(None), 1, slice(1, 3))) * 1.7)
        elif op == "concat":
            z = E.concat([x, y * 2.0], axis=1)
            return E.sum_(z * c6)
        elif op == "transpose":
            return E.sum_(E.transpose(x, (0, 2, 3, 1)) * E.constant(c.data.transpose(0, 2, 3, 1))) + E.sum_(y)
        else:
            return E.sum_(E.broadcast_to(E.sum_(x, axis=0, keepdims=True), (2, 3, 4, 4)) * y * c)
        return E.sum_(z * c)

    assert E.finite_diff_check(f, {"a": a, "b": b}) <= 1e-5


def test_grad_as_graph_equals_backward_on_cnn():
    rng = np.random.default_rng(7)
    x = leaf(rng.normal(size=(2, 2, 8, 8)), "x")
    w = leaf(rng.normal(size=(3, 2, 3, 3)), "w")
    v = leaf(rng.normal(size=(3, 4)), "v")
    h = E.global_avg_pool(E.relu(E.conv2d(x, w, 1, 1)))
    score = E.sum_(E.matmul(h, v) * E.constant(rng.normal(size=(2, 4))))
    num = E.backward(score, [x, w, v])
    gg = E.grad_as_graph(score, [x, w, v])
    for leaf_, g in zip([x, w, v], gg):
        np.testing.assert_allclose(g.data, num[leaf_], rtol=1e-6, atol=1e-12)


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_single_step():
    p = {"p": leaf(1.0, "p")}
    out = E.sgd_step(p, {"p": np.array(2.0)}, lr=0.1, momentum=0.0)
    assert out["p"].data.item() == pytest.approx(0.8)


def test_sgd_zero_lr_is_identity():
    p = {"p": leaf([1.0, -3.0], "p")}
    assert E.sgd_step(p, {"p": np.array([5.0, 5.0])}, lr=0.0)["p"].data.tolist() == [1.0, -3.0]


def test_sgd_momentum_two_steps():
    opt = E.SGD(0.1, 0.9)
    p = {"p": leaf(0.0, "p")}
    p = opt.step(p, {"p": np.array(1.0)})
    p = opt.step(p, {"p": np.array(1.0)})
    assert p["p"].data.item() == pytest.approx(-0.29)


def test_sgd_missing_gradient():
    with pytest.raises(KeyError, match="q"):
        E.sgd_step({"p": leaf(1.0, "p"), "q": leaf(1.0, "q")}, {"p": np.array(1.0)}, lr=0.1)


def test_sgd_rejects_bad_momentum():
    with pytest.raises(ValueError):
        E.SGD(0.1, 1.0)


def test_sgd_accepts_gradmap_keyed_by_node():
    p = {"p": leaf(2.0, "p")}
    g = E.backward(E.square(p["p"]), [p["p"]])
    assert E.sgd_step(p, g, lr=0.25)["p"].data.item() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=8),
       st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=8))
def test_add_mul_gradients_property(xs, ys):
    n = min(len(xs), len(ys))
    x, y = leaf(xs[:n]), leaf(ys[:n])
    g = E.backward(E.sum_(x * y + x), [x, y])
    np.testing.assert_allclose(g[x], np.asarray(ys[:n]) + 1.0)
    np.testing.assert_allclose(g[y], np.asarray(xs[:n]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_conv_triple_is_adjoint(seed):
    # <conv(x, w), g> == <x, conv_input_grad(g, w)> == <w, conv_weight_grad(x, g)>
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = rng.normal(size=(2, 2, 7, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    y = E.conv2d(leaf(x), leaf(w), stride, pad).data
    g = rng.normal(size=y.shape)
    lhs = (y * g).sum()
    dx = E.conv2d_input_grad(leaf(g), leaf(w), x.shape, stride, pad).data
    dw = E.conv2d_weight_grad(leaf(x), leaf(g), w.shape, stride, pad).data
    assert (x * dx).sum() == pytest.approx(lhs, rel=1e-9, abs=1e-9)
    assert (w * dw).sum() == pytest.approx(lhs, rel=1e-9, abs=1e-9)


def test_float32_default_dtype_kept():
    x = E.tensor(np.ones((2, 2), dtype=np.float32))
    assert (x * 2.0).dtype == np.float32
    assert isinstance(x, Tensor)
