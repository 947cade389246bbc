import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapesig.autodiff import (
    NonDeterministicError, NonFiniteError, Parameter, Tape, TapeError, Tensor,
    add, apply_op, backward, clamp_max, concat_channels, conv3d,
    conv_transpose3d, div, finite_difference_check, flush_subnormal, mean_all, mul, relu, scale,
    sigmoid, sqrt, square, sum_all,
)
from shapesig.gradcheck import op_cases


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def grad_of(loss_fn, *tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return [t.grad for t in tensors]


def brute_conv3d(x, w, b, stride, padding):
    """Direct six-fold loop; the independent reference for conv3d."""
    B, Ci, D, H, W = x.shape
    Co, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    Do = (D + 2 * padding - k) // stride + 1
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, Co, Do, Ho, Wo))
    for o in range(Co):
        for d in range(Do):
            for h in range(Ho):
                for q in range(Wo):
                    win = xp[0, :, d * stride:d * stride + k, h * stride:h * stride + k,
                             q * stride:q * stride + k]
                    out[0, o, d, h, q] = (win * w[o]).sum() + (b[o] if b is not None else 0)
    return out


def brute_conv_transpose3d(x, w, stride, padding):
    """Scatter formulation: every input voxel stamps the kernel into the output."""
    B, Ci, D, H, W = x.shape
    _, Co, k, _, _ = w.shape
    full = np.zeros((B, Co, (D - 1) * stride + k, (H - 1) * stride + k, (W - 1) * stride + k))
    for c in range(Ci):
        for d in range(D):
            for h in range(H):
                for q in range(W):
                    full[0, :, d * stride:d * stride + k, h * stride:h * stride + k,
                         q * stride:q * stride + k] += x[0, c, d, h, q] * w[c]
    p = padding
    return full[:, :, p:full.shape[2] - p, p:full.shape[3] - p, p:full.shape[4] - p]


# --- conv3d -----------------------------------------------------------------

def test_conv3d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rand(rng, 1, 1, 5, 4, 3))
    w = Tensor(np.ones((1, 1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    np.testing.assert_array_equal(conv3d(x, w, b).data, x.data)


def test_conv3d_window_sum():
    x = Tensor(np.arange(1, 9, dtype=np.float32).reshape(1, 1, 2, 2, 2))
    w = Tensor(np.ones((1, 1, 2, 2, 2)))
    out = conv3d(x, w, Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == 36.0


def test_conv3d_zero_input_gives_bias():
    rng = np.random.default_rng(1)
    w = Tensor(rand(rng, 3, 2, 3, 3, 3))
    b = Tensor(np.array([0.5, -1.0, 2.0], np.float32))
    out = conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), w, b, stride=1, padding=1)
    for c in range(3):
        assert (out.data[0, c] == b.data[c]).all()


@pytest.mark.parametrize("stride,padding,k,n", [(1, 1, 3, 6), (2, 1, 3, 7), (1, 0, 3, 5), (2, 0, 2, 6)])
def test_conv3d_matches_brute_force(stride, padding, k, n):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rand(rng, 1, 2, n, n - 1, n)
    w = rand(rng, 3, 2, k, k, k)
    b = rand(rng, 3)
    out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, brute_conv3d(x, w, b, stride, padding), rtol=1e-5, atol=1e-5)


def test_conv3d_output_extent():
    out = conv3d(Tensor(np.zeros((1, 1, 9, 8, 7))), Tensor(np.zeros((2, 1, 3, 3, 3))), None, 2, 1)
    assert out.shape == (1, 2, 5, 4, 4)


def test_conv3d_errors():
    with pytest.raises(ValueError, match="channels"):
        conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ValueError, match="non-positive"):
        conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))


# --- conv_transpose3d -------------------------------------------------------

def test_conv_transpose_identity_kernel():
    rng = np.random.default_rng(2)
    x = Tensor(rand(rng, 1, 1, 3, 4, 5))
    out = conv_transpose3d(x, Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_transpose_single_voxel_scatter():
    v = 2.5
    out = conv_transpose3d(Tensor(np.full((1, 1, 1, 1, 1), v)), Tensor(np.ones((1, 1, 2, 2, 2))), None, 2, 0)
    assert out.shape == (1, 1, 2, 2, 2)
    assert (out.data == v).all()


@pytest.mark.parametrize("stride,padding,k,n", [(1, 1, 3, 4), (2, 1, 3, 3), (2, 0, 2, 3), (1, 0, 3, 2)])
def test_conv_transpose_matches_scatter(stride, padding, k, n):
    rng = np.random.default_rng(3)
    x = rand(rng, 1, 3, n, n, n)
    w = rand(rng, 3, 2, k, k, k)
    out = conv_transpose3d(Tensor(x), Tensor(w), None, stride, padding)
    np.testing.assert_allclose(out.data, brute_conv_transpose3d(x, w, stride, padding), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("stride,padding,k,n", [(1, 1, 3, 8), (2, 0, 2, 8), (2, 1, 3, 7), (1, 0, 3, 8)])
def test_conv_adjoint_identity(stride, padding, k, n):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, n, n, n))
    w = rng.standard_normal((3, 2, k, k, k))
    y_shape = conv3d(Tensor(x), Tensor(w), None, stride, padding).shape
    y = rng.standard_normal(y_shape)
    lhs = (conv3d(Tensor(x), Tensor(w), None, stride, padding).data * y).sum()
    rhs = (x * conv_transpose3d(Tensor(y), Tensor(w), None, stride, padding).data).sum()
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


def test_conv_transpose_equals_conv_input_grad():
    rng = np.random.default_rng(5)
    x = Parameter("x", rand(rng, 1, 2, 7, 7, 7))
    w = Tensor(rand(rng, 3, 2, 3, 3, 3))
    y = conv3d(x, w, None, 2, 1)
    g = rand(rng, *y.shape)
    (gx,) = grad_of(lambda: sum_all(mul(conv3d(x, w, None, 2, 1), Tensor(g))), x)
    np.testing.assert_allclose(conv_transpose3d(Tensor(g), w, None, 2, 1).data, gx, rtol=1e-5, atol=1e-5)


# --- pointwise ops ------------------------------------------------------------

def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert sigmoid(Tensor(0.0)).item() == 0.5
    big = sigmoid(Tensor(np.array([-500.0, 500.0], np.float32))).data
    assert np.isfinite(big).all() and big[0] == 0.0 and big[1] == 1.0


def test_clamp_max_value_and_subgradient():
    x = Parameter("x", np.array([0.4, 1.7], np.float32))
    np.testing.assert_allclose(clamp_max(x, 1.0).data, [0.4, 1.0])
    (g,) = grad_of(lambda: sum_all(clamp_max(x, 1.0)), x)
    np.testing.assert_array_equal(g, [1.0, 0.0])
    # finite differences agree away from the threshold
    report = finite_difference_check(lambda: sum_all(clamp_max(x, 1.0)), [x], eps=1e-3, dtype=np.float64)
    assert report.max_rel_error < 1e-9


def test_clamp_max_gradient_exactly_zero_at_threshold():
    x = Parameter("x", np.array([1.0, 1.0 + 1e-6, 5.0], np.float32))
    (g,) = grad_of(lambda: sum_all(clamp_max(x, 1.0)), x)
    assert (g == 0).all()


def test_sqrt_rules():
    with pytest.raises(ValueError, match="negative"):
        sqrt(Tensor([-1.0]))
    x = Parameter("x", np.array([0.0, 4.0], np.float32))
    (g,) = grad_of(lambda: sum_all(sqrt(x)), x)
    np.testing.assert_array_equal(g, [0.0, 0.25])


def test_scalar_broadcast_only():
    a = Tensor(np.ones((2, 3)))
    assert add(a, 1.0).shape == (2, 3)
    assert mul(Tensor(2.0), a).shape == (2, 3)
    with pytest.raises(ValueError, match="shape mismatch"):
        add(a, Tensor(np.ones(3)))


def test_scalar_broadcast_gradient_sums():
    s = Parameter("s", np.array(2.0, np.float32))
    a = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    (g,) = grad_of(lambda: sum_all(mul(a, s)), s)
    assert g == 15.0


def test_mean_all():
    x = Parameter("x", np.arange(4, dtype=np.float32))
    assert mean_all(x).item() == 1.5
    (g,) = grad_of(lambda: mean_all(x), x)
    np.testing.assert_array_equal(g, [0.25] * 4)


# --- concat -------------------------------------------------------------------

def test_concat_channels_shape():
    out = concat_channels(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 4, 4, 4))))
    assert out.shape == (1, 5, 4, 4, 4)
    with pytest.raises(ValueError, match="extents"):
        concat_channels(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 4, 4, 2))))


def test_concat_gradient_routing():
    rng = np.random.default_rng(6)
    x = Parameter("x", rand(rng, 1, 2, 3, 3, 3))
    z = Parameter("z", np.zeros((1, 1, 3, 3, 3), np.float32))
    weights = rand(rng, 1, 3, 3, 3, 3)
    gx, gz = grad_of(lambda: sum_all(mul(concat_channels(x, z), Tensor(weights))), x, z)
    np.testing.assert_array_equal(gx, weights[:, :2])
    np.testing.assert_array_equal(gz, weights[:, 2:])


def test_concat_identical_sum_gradient_all_ones():
    x = Parameter("x", np.ones((1, 2, 2, 2, 2), np.float32))
    y = Parameter("y", np.ones((1, 2, 2, 2, 2), np.float32))
    gx, gy = grad_of(lambda: sum_all(concat_channels(x, y)), x, y)
    assert (gx == 1).all() and (gy == 1).all()


# --- backward -----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Parameter("x", np.zeros((2, 3, 4), np.float32))
    (g,) = grad_of(lambda: sum_all(x), x)
    assert g.shape == (2, 3, 4) and (g == 1).all()


def test_backward_square():
    x = Parameter("x", np.array([1.0, 2.0, 3.0], np.float32))
    (g,) = grad_of(lambda: sum_all(square(x)), x)
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_backward_twice_is_an_error():
    x = Parameter("x", np.ones(3, np.float32))
    with Tape() as tape:
        loss = sum_all(x)
        tape.backward(loss)
        with pytest.raises(TapeError, match="already"):
            backward(loss)


def test_backward_needs_scalar_and_tape():
    x = Parameter("x", np.ones(3, np.float32))
    with Tape() as tape:
        y = square(x)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)
    with pytest.raises(TapeError, match="tape"):
        backward(sum_all(x))


def test_shared_subexpression_accumulates():
    x = Parameter("x", np.array([3.0], np.float32))
    (g,) = grad_of(lambda: sum_all(mul(x, x) + x), x)
    assert g[0] == 7.0


def test_no_recording_outside_tape():
    x = Parameter("x", np.ones(2, np.float32))
    y = square(x)
    assert y.node is None


def test_nonfinite_forward_is_hard_error():
    with pytest.raises(NonFiniteError):
        div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        scale(Tensor(np.array([3e38], np.float32)), 10.0)


# --- finite-difference harness ------------------------------------------------

def test_fd_sum_of_squares_is_tight():
    x = Parameter("x", np.random.default_rng(7).standard_normal(20).astype(np.float32))
    report = finite_difference_check(lambda: sum_all(square(x)), [x], dtype=np.float64)
    assert report.max_rel_error < 1e-6
    assert report.passed and report.n_checked == 20


def wrong_square(x):
    xd = x.data
    # deliberately wrong: derivative of x^2 taken as x
    return apply_op(xd * xd, (x,), lambda g: (g * xd,), "wrong_square")


def test_fd_detects_wrong_backward_rule():
    x = Parameter("x", np.random.default_rng(8).standard_normal(5).astype(np.float32))
    report = finite_difference_check(lambda: sum_all(wrong_square(x)), [x])
    assert not report.passed
    assert report.max_rel_error > 0.3


def test_fd_detects_nondeterminism():
    x = Parameter("x", np.ones(3, np.float32))
    counter = iter(range(10 ** 6))

    def f():
        return add(sum_all(x), float(next(counter)))

    with pytest.raises(NonDeterministicError):
        finite_difference_check(f, [x])


def test_fd_restores_parameters():
    x = Parameter("x", np.arange(3, dtype=np.float32))
    before = x.data.copy()
    finite_difference_check(lambda: sum_all(square(x)), [x], dtype=np.float64)
    assert x.data.dtype == np.float32
    np.testing.assert_array_equal(x.data, before)


def test_fd_eps_range_enforced():
    x = Parameter("x", np.ones(1, np.float32))
    with pytest.raises(ValueError):
        finite_difference_check(lambda: sum_all(x), [x], eps=1.0)


OP_NAMES = list(op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-5)])
def test_every_op_passes_gradient_check(name, dtype, tol):
    fn, params = op_cases(np.random.default_rng(10))[name]
    report = finite_difference_check(fn, params, eps=1e-4, tol=tol, dtype=dtype)
    assert report.passed, (name, report.per_param)


@pytest.mark.parametrize("name", ["div", "sqrt", "sigmoid", "mul", "conv3d_s1"])
def test_kink_guard_excludes_nothing_on_smooth_ops(name):
    fn, params = op_cases(np.random.default_rng(10))[name]
    report = finite_difference_check(fn, params, eps=1e-5, tol=1e-5, dtype=np.float64,
                                     kink_guard=True)
    assert report.n_excluded == 0 and report.passed


def test_kink_guard_flags_probe_at_kink():
    x = Parameter("x", np.array([0.0, 0.5, -0.7]))
    report = finite_difference_check(lambda: sum_all(relu(x)), [x], eps=1e-5, tol=1e-5,
                                     dtype=np.float64, kink_guard=True)
    assert report.n_excluded == 1 and report.passed
    plain = finite_difference_check(lambda: sum_all(relu(x)), [x], eps=1e-5, tol=1e-5,
                                    dtype=np.float64)
    assert not plain.passed


def test_kink_guard_still_catches_wrong_rule():
    x = Parameter("x", np.array([0.3, -1.2, 2.0]))
    report = finite_difference_check(lambda: sum_all(relu(wrong_square(x))), [x],
                                     dtype=np.float64, kink_guard=True)
    assert report.n_excluded == 0 and not report.passed


# --- determinism --------------------------------------------------------------

def test_forward_and_gradients_bit_identical_across_runs():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rand(rng, 1, 1, 8, 8, 8))
        w = Parameter("w", rand(rng, 4, 1, 3, 3, 3))
        w2 = Parameter("w2", rand(rng, 4, 2, 2, 2, 2))
        with Tape() as tape:
            h = relu(conv3d(x, w, None, 2, 1))
            out = conv_transpose3d(h, w2, None, 2, 0)
            loss = sum_all(square(out))
            tape.backward(loss)
        return out.data.tobytes(), w.grad.tobytes(), w2.grad.tobytes()

    assert run() == run()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5, width=32), min_size=1, max_size=12))
def test_relu_sigmoid_properties(values):
    x = Tensor(np.array(values, np.float32))
    r = relu(x).data
    assert (r >= 0).all() and np.array_equal(r, np.maximum(x.data, 0))
    s = sigmoid(x).data
    assert ((s > 0) & (s < 1)).all()
    np.testing.assert_allclose(sigmoid(-x).data, 1 - s, atol=1e-6)


def test_subnormal_gradients_flush_to_zero():
    x = Parameter("x", np.array([-95.0, 0.5], np.float32))
    with Tape() as tape:
        tape.backward(sum_all(sigmoid(x)))
    # sigmoid'(-95) ~ 5e-42 is subnormal in float32; sigmoid'(0.5) is untouched
    assert x.grad[0] == 0.0
    s = 1 / (1 + np.exp(-0.5))
    assert abs(x.grad[1] - s * (1 - s)) < 1e-7


def test_flush_subnormal_leaves_normal_values_bit_exact():
    g = np.array([1e-30, -3.0, 0.0, 1e-40, -1e-45], np.float32)
    out = flush_subnormal(g)
    assert out.dtype == np.float32
    assert out.tolist() == [np.float32(1e-30), -3.0, 0.0, 0.0, 0.0]
