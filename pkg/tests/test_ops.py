import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfmnet.autodiff import Tensor, grad_check, high_precision, ops
from cfmnet.errors import ConfigError, ShapeError

from conftest import conv_oracle


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = Tensor(rng.random((1, 1, 5, 5)))
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1
    out = ops.conv2d(x, Tensor(w), Tensor(np.zeros(1, dtype=np.float32)), "same")
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_constant_field_valid():
    out = ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), None, "valid")
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 9.0))


@pytest.mark.parametrize("padding,pad", [("same", 1), ("valid", 0)])
def test_conv_matches_loop_oracle(rng, padding, pad):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    with high_precision():
        out = ops.conv2d(t64(x), t64(w), t64(b), padding).data
    np.testing.assert_allclose(out, conv_oracle(x, w, b, pad), atol=1e-6)


def test_conv_rectangular_and_1x1(rng):
    x = rng.standard_normal((1, 2, 5, 7))
    w = rng.standard_normal((3, 2, 1, 1))
    with high_precision():
        out = ops.conv2d(t64(x), t64(w), None, "same").data
    np.testing.assert_allclose(out, conv_oracle(x, w), atol=1e-12)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(rng.random((1, 2, 4, 4))), Tensor(rng.random((1, 3, 3, 3))))


def test_conv_valid_too_small(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(rng.random((1, 1, 2, 2))), Tensor(rng.random((1, 1, 3, 3))), padding="valid")


def test_conv_weight_grad_vs_finite_differences(rng):
    with high_precision():
        x, w, t = t64(rng.standard_normal((2, 2, 5, 5)), False), t64(rng.standard_normal((3, 2, 3, 3))), \
            t64(rng.standard_normal((2, 3, 5, 5)), False)
        rep = grad_check(lambda: ops.mse_loss(ops.conv2d(x, w), t), [w])
    assert rep.passed, rep.message
    assert rep.max_rel_error < 1e-4


def test_conv_fault_hook_breaks_gradcheck(rng):
    with high_precision():
        x = t64(rng.standard_normal((1, 2, 4, 4)))
        w = t64(rng.standard_normal((2, 2, 3, 3)))
        ops.FAULTS.add("conv2d")
        rep = grad_check(lambda: ops.sum_all(ops.mul(ops.conv2d(x, w), ops.conv2d(x, w))), [w])
    assert not rep.passed


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7), st.integers(0, 2**31 - 1))
def test_conv_is_linear_in_input(c, k, h, w, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((2, 1, c, h, w))
    wt = t64(r.standard_normal((k, c, 3, 3)), False)
    with high_precision():
        lhs = ops.conv2d(t64(2 * a - b, False), wt).data
        rhs = 2 * ops.conv2d(t64(a, False), wt).data - ops.conv2d(t64(b, False), wt).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# -- transposed conv ---------------------------------------------------------

def test_transpose_replicates_blocks():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ops.conv_transpose2x2(x, Tensor(np.ones((1, 1, 2, 2))))
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_transpose_zero_input_gives_bias(rng):
    b = rng.standard_normal(3)
    out = ops.conv_transpose2x2(Tensor(np.zeros((1, 2, 3, 3))), Tensor(rng.standard_normal((3, 2, 2, 2))), Tensor(b))
    np.testing.assert_allclose(out.data, np.broadcast_to(b[None, :, None, None], (1, 3, 6, 6)), atol=1e-7)


def test_transpose_is_adjoint_of_strided_conv(rng):
    # forward op: y[k, i, j] = sum_c,a,b x[c, 2i+a, 2j+b] w[k, c, a, b] (stride 2, 2x2)
    x = rng.standard_normal((1, 3, 8, 8))
    u = rng.standard_normal((1, 4, 4, 4))
    w = rng.standard_normal((4, 3, 2, 2))
    fwd = np.zeros((1, 4, 4, 4))
    for k in range(4):
        for i in range(4):
            for j in range(4):
                fwd[0, k, i, j] = np.sum(x[0, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2] * w[k])
    # the transposed op maps K_out <- C_in, so its kernel is w with roles swapped
    with high_precision():
        back = ops.conv_transpose2x2(t64(u, False), t64(w.transpose(1, 0, 2, 3), False)).data
    assert np.sum(fwd * u) == pytest.approx(np.sum(x * back), abs=1e-6)


def test_transpose_rejects_other_kernels(rng):
    with pytest.raises(ConfigError):
        ops.conv_transpose2x2(Tensor(rng.random((1, 1, 2, 2))), Tensor(rng.random((1, 1, 3, 3))))


# -- pooling -----------------------------------------------------------------

def test_pool_single_window():
    out = ops.max_pool2x2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.item() == 4.0


def test_pool_constant_tie_break():
    x = Tensor(np.full((1, 1, 4, 4), 0.5), requires_grad=True)
    out = ops.max_pool2x2(x)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 0.5))
    out.sum().backward()
    blocks = x.grad.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    np.testing.assert_array_equal(blocks.sum(axis=1), np.ones(4))
    # first element of each window in row-major order
    np.testing.assert_array_equal(x.grad[0, 0, ::2, ::2], np.ones((2, 2)))


def test_pool_matches_window_oracle(rng):
    x = rng.standard_normal((1, 1, 8, 8))
    expected = np.array([[x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(4)] for i in range(4)])
    np.testing.assert_array_equal(ops.max_pool2x2(Tensor(x)).data[0, 0], expected)


def test_pool_odd_size_rejected(rng):
    with pytest.raises(ShapeError):
        ops.max_pool2x2(Tensor(rng.random((1, 1, 5, 4))))


# -- relu / concat / slice ---------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0.0, 0.0, 2.0])


def test_relu_all_negative_zero_grad():
    x = Tensor(-np.ones((1, 1, 3, 3)), requires_grad=True)
    y = ops.relu(x)
    y.sum().backward()
    assert not y.data.any() and not x.grad.any()


def test_relu_finite_differences(rng):
    base = rng.standard_normal((1, 2, 4, 4))
    base = np.sign(base) * (np.abs(base) + 0.1)
    with high_precision():
        x = t64(base)
        r = t64(rng.standard_normal(base.shape), False)
        rep = grad_check(lambda: ops.sum_all(ops.mul(ops.relu(x), r)), [x], step=1e-6, tolerance=1e-6)
    assert rep.passed, rep.message


def test_concat_keeps_slices(rng):
    a, b = rng.random((1, 1, 2, 2)), rng.random((1, 1, 2, 2))
    out = ops.concat_channels(Tensor(a), Tensor(b)).data
    assert out.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(out[:, :1], a)
    np.testing.assert_array_equal(out[:, 1:], b)


def test_concat_with_empty(rng):
    x = Tensor(rng.random((1, 3, 2, 2)))
    out = ops.concat_channels(x, Tensor(np.zeros((1, 0, 2, 2), dtype=np.float32)))
    np.testing.assert_array_equal(out.data, x.data)


def test_concat_backward_all_ones(rng):
    a = Tensor(rng.random((2, 1, 3, 3)), requires_grad=True)
    b = Tensor(rng.random((2, 2, 3, 3)), requires_grad=True)
    ops.concat_channels(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones(a.shape))
    np.testing.assert_array_equal(b.grad, np.ones(b.shape))


def test_slice_backward_pads_zeros(rng):
    x = Tensor(rng.random((1, 4, 2, 2)), requires_grad=True)
    ops.slice_channels(x, 1, 3).sum().backward()
    np.testing.assert_array_equal(x.grad[0, :, 0, 0], [0, 1, 1, 0])


# -- batch norm --------------------------------------------------------------

def test_bn_train_normalises(rng):
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    out = ops.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_bn_gamma_beta_on_normalised_input(rng):
    z = rng.standard_normal((4, 2, 6, 6))
    z = (z - z.mean(axis=(0, 2, 3), keepdims=True)) / z.std(axis=(0, 2, 3), keepdims=True)
    with high_precision():
        out = ops.batch_norm(t64(z, False), t64(np.full(2, 2.0)), t64(np.full(2, 3.0)), np.zeros(2), np.ones(2),
                             training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2, atol=1e-4)


def test_bn_running_stats_update(rng):
    x = rng.standard_normal((4, 2, 3, 3)) + 5
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(t64(x, False), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_bn_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    rm, rv = np.array([0.5, -1.0]), np.array([2.0, 0.5])
    with high_precision():
        out = ops.batch_norm(t64(x, False), t64([1.5, 0.5]), t64([0.1, 0.2]), rm, rv, training=False).data
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv + 1e-5)[None, :, None, None]
    ref = ref * np.array([1.5, 0.5])[None, :, None, None] + np.array([0.1, 0.2])[None, :, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("training", [True, False])
def test_bn_grads_vs_finite_differences(rng, training):
    with high_precision():
        x = t64(rng.standard_normal((3, 2, 3, 3)))
        g, b = t64(rng.standard_normal(2)), t64(rng.standard_normal(2))
        r = t64(rng.standard_normal((3, 2, 3, 3)), False)

        def f():
            out = ops.batch_norm(x, g, b, np.zeros(2), np.ones(2), training=training)
            return ops.sum_all(ops.mul(out, r))

        rep = grad_check(f, [x, g, b])
    assert rep.max_rel_error < 1e-4, rep.message


# -- loss --------------------------------------------------------------------

def test_mse_zero_when_equal(rng):
    x = Tensor(rng.random((2, 1, 3, 3)))
    assert ops.mse_loss(x, x).item() == 0.0


def test_mse_half_pixel_count():
    p = Tensor(np.zeros((1, 3, 4, 5)))
    t = Tensor(np.ones((1, 3, 4, 5)))
    assert ops.mse_loss(p, t).item() == 30.0


def test_mse_matches_loop(rng):
    p, t = rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((3, 2, 4, 4))
    acc = 0.0
    for v in np.ndindex(p.shape):
        acc += (p[v] - t[v]) ** 2
    with high_precision():
        got = ops.mse_loss(t64(p, False), t64(t, False)).item()
    assert got == pytest.approx(acc / 6.0, abs=1e-7)


def test_mse_doubling_residual_quadruples(rng):
    t = rng.standard_normal((2, 1, 4, 4))
    d = rng.standard_normal((2, 1, 4, 4))
    with high_precision():
        a = ops.mse_loss(t64(t + d, False), t64(t, False)).item()
        b = ops.mse_loss(t64(t + 2 * d, False), t64(t, False)).item()
    assert b == pytest.approx(4 * a, rel=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.mse_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


# -- grad_check itself -------------------------------------------------------

def test_gradcheck_quadratic():
    with high_precision():
        x = t64(np.array([[[[0.3, -1.2], [2.0, 0.7]]]]))
        rep = grad_check(lambda: ops.mul(ops.sum_all(ops.mul(x, x)), t64(0.5, False)), [x])
    assert rep.max_rel_error < 1e-8


def test_gradcheck_reports_non_finite():
    with high_precision():
        x = t64(np.array([1.0]))

        def f():
            return ops.sum_all(ops.mul(x, t64(np.inf if x.data[0] > 1 else 1.0, False)))

        rep = grad_check(f, [x])
    assert not rep.passed and "non-finite" in rep.message


def test_outputs_finite_on_finite_inputs(rng, tiny_net):
    y = Tensor(rng.random((2, 1, 16, 16)))
    m = Tensor(np.full((2, 1, 16, 16), 0.3, dtype=np.float32))
    out = tiny_net(y, m)
    ops.mse_loss(out, y).backward()
    assert np.all(np.isfinite(out.data))
    assert all(np.all(np.isfinite(p.grad)) for p in tiny_net.parameters())
