import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dbda import tensor as T
from dbda.tensor import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_relu_forward():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    d = 2
    expected = np.zeros((1, 3, 6, 7))
    for o in range(3):
        for y in range(6):
            for xx in range(7):
                acc = b[o]
                for c in range(2):
                    for i in range(3):
                        for j in range(3):
                            yy, xj = y + (i - 1) * d, xx + (j - 1) * d
                            if 0 <= yy < 6 and 0 <= xj < 7:
                                acc += w[o, c, i, j] * x[0, c, yy, xj]
                expected[0, o, y, xx] = acc
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=d)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_conv2d_gradient_finite_differences():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((1, 2, 5, 5))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    r = rng.standard_normal((1, 3, 5, 5))

    def f(x):
        return T.sum_(T.mul(T.conv2d(x, w, dilation=2), r))

    x = leaf(x0)
    T.backward(f(x))
    h = 1e-5
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        numeric[idx] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * h)
    assert np.max(np.abs(x.grad - numeric)) < 1e-6


def test_conv2d_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_add_shape_error():
    with pytest.raises(T.ShapeError, match="add"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_uniform_for_zero_logits():
    p = T.softmax_channel(Tensor(np.zeros((1, 6, 2, 2))))
    np.testing.assert_allclose(p.data, 1 / 6, atol=1e-15)


def test_softmax_analytic_two_classes():
    logits = np.array([math.log(1.0), math.log(3.0)]).reshape(1, 2, 1, 1)
    p = T.softmax_channel(Tensor(logits)).data.ravel()
    np.testing.assert_allclose(p, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (2, 5, 3, 3), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_sums_to_one_and_shift_invariant(logits, shift):
    p = T.softmax_channel(Tensor(logits)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    shifted = T.softmax_channel(Tensor(logits + shift)).data
    np.testing.assert_allclose(shifted, p, atol=1e-9)


def test_softmax_stable_for_huge_logits():
    p = T.softmax_channel(Tensor(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1))).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.ravel(), [1.0, 0.0], atol=1e-12)


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.backward(T.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    x0 = np.random.default_rng(3).standard_normal((3, 4))
    x = leaf(x0)
    T.backward(T.sum_(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x0, atol=0)


def test_backward_rejects_non_scalar():
    with pytest.raises(T.ShapeError, match="scalar"):
        T.backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_shared_subexpression_accumulates():
    x = leaf([1.5, -2.0])
    y = T.mul(x, 3.0)
    T.backward(T.sum_(T.add(y, y)))
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 3, 8, 8))
    w0 = rng.standard_normal((4, 3, 3, 3))

    def grads():
        x, w = leaf(x0), leaf(w0)
        p = T.softmax_channel(T.relu(T.conv2d(x, w, dilation=2)))
        T.backward(T.mean(T.log(T.clamp_min(p, 1e-12))))
        return x.grad, w.grad

    (gx1, gw1), (gx2, gw2) = grads(), grads()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_forward_values_finite():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)) * 30)
    out = T.softmax_channel(T.conv2d(x, Tensor(rng.standard_normal((5, 3, 3, 3)))))
    assert np.all(np.isfinite(out.data))


def test_checkpoint_roundtrip_and_layout(tmp_path):
    params = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array([0.5])}
    path = tmp_path / "x.ckpt"
    T.save_checkpoint(path, params, {"num_classes": "4"})
    raw = path.read_bytes()
    assert raw[:4] == b"DBDA"
    assert int.from_bytes(raw[4:8], "little") == T.CHECKPOINT_VERSION
    header, loaded = T.load_checkpoint(path)
    assert header == {"num_classes": "4"}
    assert list(loaded) == list(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        T.load_checkpoint(path)


def test_scalar_tensor_keeps_zero_dims():
    assert T.Tensor(0.0).shape == ()
    assert T.mean(T.Tensor(np.ones((2, 3)), requires_grad=True)).shape == ()
