import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from uad3d import tensor as T
from uad3d.gradcheck import grad_check, primitive_cases, run_primitive_suite
from uad3d.tensor import DimensionError, DomainError, Tensor, UsageError


def direct_conv2d(x, w, stride, pad):
    """Sliding-window oracle: explicit loops over every output site."""
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, K, Ho, Wo))
    for b in range(B):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, k, i, j] = np.sum(patch * w[k])
    return out


def direct_conv3d(x, w, stride, pad):
    B, C, D, H, W = x.shape
    K, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    So = [(n + 2 * pad - k) // stride + 1 for n, k in zip((D, H, W), (kd, kh, kw))]
    out = np.zeros((B, K, *So))
    for idx in np.ndindex(B, K, *So):
        b, k, i, j, l = idx
        patch = xp[b, :, i * stride:i * stride + kd, j * stride:j * stride + kh, l * stride:l * stride + kw]
        out[idx] = np.sum(patch * w[k])
    return out


# ---------------------------------------------------------------- convolution


def test_conv_one_by_one_kernel_scales():
    out = T.conv(Tensor(np.ones((1, 1, 3, 3))), Tensor([[[[2.0]]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_two_by_two_window_sums():
    x = Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
    out = T.conv(x, Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
    np.testing.assert_array_equal(out.data[0, 0], [[12, 16], [24, 28]])


def test_conv_output_extent_formula():
    assert T.conv_output_extent(160, 4, 2, 1) == 80
    x = Tensor(np.zeros((1, 1, 160, 16)))
    assert T.conv(x, Tensor(np.zeros((1, 1, 4, 4))), stride=2, padding=1).shape == (1, 1, 80, 8)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 0, 3), (3, 2, 2)])
def test_conv2d_matches_direct_loops(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = T.conv(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, direct_conv2d(x, w, stride, pad) + b[None, :, None, None], atol=1e-12)


def test_conv3d_matches_direct_loops(rng):
    x = rng.standard_normal((1, 2, 6, 5, 4))
    w = rng.standard_normal((3, 2, 4, 4, 4))
    out = T.conv(Tensor(x), Tensor(w), stride=2, padding=1)
    np.testing.assert_allclose(out.data, direct_conv3d(x, w, 2, 1), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(DimensionError):
        T.conv(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))), padding=0)


def test_conv_transpose_single_site_broadcast():
    out = T.conv_transpose(Tensor([[[[3.0]]]]), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))


def test_conv_transpose_output_extent():
    assert T.conv_transpose_output_extent(80, 4, 2, 1) == 160
    x = Tensor(np.zeros((1, 1, 80, 5)))
    assert T.conv_transpose(x, Tensor(np.zeros((1, 1, 4, 4))), stride=2, padding=1).shape == (1, 1, 160, 10)


def test_conv_transpose_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv_transpose(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 2, 2))))


@pytest.mark.parametrize("shape_a,shape_b,k,stride,pad", [
    ((1, 1, 4, 4), (1, 1, 3, 3), 2, 1, 0),
    ((2, 3, 8, 8), (2, 5, 4, 4), 4, 2, 1),
    ((1, 2, 8, 8, 8), (1, 3, 4, 4, 4), 4, 2, 1),
    ((1, 1, 7, 5), (1, 2, 3, 2), 3, 2, 0),
])
def test_adjointness(rng, shape_a, shape_b, k, stride, pad):
    A = rng.standard_normal(shape_a)
    B = rng.standard_normal(shape_b)
    w = rng.standard_normal((shape_b[1], shape_a[1]) + (k,) * (len(shape_a) - 2))
    lhs = np.sum(T.conv(Tensor(A), Tensor(w), stride=stride, padding=pad).data * B)
    rhs = np.sum(A * T.conv_transpose(Tensor(B), Tensor(w), stride=stride, padding=pad).data)
    assert abs(lhs - rhs) < 1e-10


def test_linearity(rng):
    A = rng.standard_normal((1, 2, 8, 8, 8))
    B = rng.standard_normal((1, 2, 8, 8, 8))
    w = Tensor(rng.standard_normal((3, 2, 4, 4, 4)))
    alpha = 1.7
    lhs = T.conv(Tensor(alpha * A + B), w, stride=2, padding=1).data
    rhs = alpha * T.conv(Tensor(A), w, stride=2, padding=1).data + T.conv(Tensor(B), w, stride=2, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=0)


@pytest.mark.parametrize("extent", [16, 32, 48, 64, 96, 160, 192])
def test_conv_then_transpose_restores_extent(extent):
    down = T.conv_output_extent(extent, 4, 2, 1)
    assert T.conv_transpose_output_extent(down, 4, 2, 1) == extent


# ---------------------------------------------------------------- dense / elementwise


def test_dense_identity():
    out = T.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_dense_hand_product():
    out = T.dense(Tensor([[2.0, 3.0]]), Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.0, 1.0]))
    np.testing.assert_array_equal(out.data, [[5.0, 0.0]])


def test_dense_batch_rows_independent(rng):
    W, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(3))
    x = rng.standard_normal((2, 4))
    both = T.dense(Tensor(x), W, b).data
    for i in range(2):
        np.testing.assert_allclose(both[i], T.dense(Tensor(x[i:i + 1]), W, b).data[0], atol=1e-14)


def test_dense_shape_error():
    with pytest.raises(DimensionError):
        T.dense(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))))


def test_elementwise_examples():
    np.testing.assert_array_equal(T.abs(Tensor([-1.0, 2.0, 0.0])).data, [1, 2, 0])
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(T.leaky_relu(Tensor([-5.0, 5.0]), 0.2).data, [-1.0, 5.0])
    assert T.mean(Tensor([1.0, 2.0, 6.0])).item() == 3.0


def test_sigmoid_extreme_inputs_finite():
    out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_broadcast_only_scalar():
    T.add(Tensor(np.ones(3)), 2.0)
    T.mul(Tensor(np.ones(3)), Tensor(2.0))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_nonpositive_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


# ---------------------------------------------------------------- backward


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_fan_out_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = T.add(T.mul(x, 3.0), T.mul(x, x))
    T.sum(y).backward()
    np.testing.assert_array_equal(x.grad, 3.0 + 2 * x.data)


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        T.mul(x, 2.0).backward()


def test_every_requires_grad_tensor_gets_gradient_of_its_shape(rng):
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
    h = T.conv(x, w, stride=2, padding=1)
    a = T.leaky_relu(h)
    loss = T.mean(T.square(a))
    loss.backward()
    for t in (x, w, h, a, loss):
        assert t.grad is not None and t.grad.shape == t.shape


def test_graph_is_released_after_backward(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    y = T.exp(x)
    loss = T.sum(y)
    loss.backward()
    assert loss._backward is None and y._parents == ()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._backward is None


def test_deterministic_repeat(rng):
    x0 = rng.standard_normal((2, 3, 8, 8, 8))
    w0 = rng.standard_normal((4, 3, 4, 4, 4))

    def run():
        x, w = Tensor(x0.copy(), requires_grad=True), Tensor(w0.copy(), requires_grad=True)
        loss = T.sum(T.square(T.conv(x, w, stride=2, padding=1)))
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- gradient checks


@pytest.mark.parametrize("name", list(primitive_cases()))
def test_primitive_gradients(name):
    fn, inputs, tol = primitive_cases()[name]
    report = grad_check(fn, inputs, step=1e-5, tol=tol, name=name)
    assert report.passed, (name, report.errors)


def test_grad_check_conv2d_1x2x5x5(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    rep = grad_check(lambda x, w, b: T.square(T.conv(x, w, b, stride=1, padding=1)), [x, w, b], tol=1e-4)
    assert rep.passed


def test_grad_check_conv3d_4cube(rng):
    x = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)))
    rep = grad_check(lambda x, w: T.square(T.conv(x, w, padding=1)), [x, w], tol=1e-4)
    assert rep.passed


def test_grad_check_detects_broken_rule(monkeypatch):
    real = T.exp

    def broken(x):
        out = real(x)
        fn = out._backward
        out._backward = lambda g: tuple(1.1 * gi for gi in fn(g))
        return out

    monkeypatch.setattr(T, "exp", broken)
    fn, inputs, tol = primitive_cases()["exp"]
    assert not grad_check(fn, inputs, tol=tol).passed


def test_primitive_suite_lists_each_primitive_once():
    names = [r.name for r in run_primitive_suite()]
    assert len(names) == len(set(names))
    for op in ("add", "sub", "mul", "exp", "log", "abs", "sigmoid", "leaky_relu", "sum", "mean",
               "dense", "conv2d", "conv3d", "conv_transpose2d", "conv_transpose3d"):
        assert op in names


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 9), st.integers(1, 3), st.integers(0, 2),
       st.integers(0, 2**31 - 1))
def test_adjointness_property(c_in, c_out, n, k, pad, seed):
    stride = 1 + seed % 2
    # exact adjoint pairs need the windows to tile the padded input
    assume(n + 2 * pad >= k and (n + 2 * pad - k) % stride == 0)
    rng = np.random.default_rng(seed)
    out_n = T.conv_output_extent(n, k, stride, pad)
    A = rng.standard_normal((1, c_in, n, n))
    B = rng.standard_normal((1, c_out, out_n, out_n))
    w = rng.standard_normal((c_out, c_in, k, k))
    lhs = np.sum(T.conv(Tensor(A), Tensor(w), stride=stride, padding=pad).data * B)
    back = T.conv_transpose(Tensor(B), Tensor(w), stride=stride, padding=pad).data
    assert back.shape == A.shape
    rhs = np.sum(A * back)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))
