import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capdistill import gradcheck, kernels
from capdistill import tensor as T
from capdistill.tensor import ShapeError, Tensor


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    d, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, d, ho, wo))
    for i in range(n):
        for o in range(d):
            for y in range(ho):
                for z in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                s += xp[i, ch, y * stride + u, z * stride + v] * w[o, ch, u, v]
                    out[i, o, y, z] = s + (b[o] if b is not None else 0.0)
    return out


# --- conv2d -------------------------------------------------------------------
def test_conv_identity_kernel():
    out = T.conv2d(Tensor(np.full((1, 1, 1, 1), 5.0)), Tensor(np.ones((1, 1, 1, 1))))
    assert out.data.reshape(-1).tolist() == [5.0]


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=0)
    assert out.data.reshape(-1).tolist() == [9.0]


@pytest.mark.parametrize("stride,pad,bias", [(1, 1, False), (1, 1, True), (1, 0, True), (3, 1, False)])
def test_conv_matches_naive_loop(rng, stride, pad, bias):
    h = 4 if stride == 1 else 7
    x = rng.standard_normal((1, 2, h, h))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3) if bias else None
    got = T.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(got.data, naive_conv(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_1x1_matches_naive_loop(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((5, 3, 1, 1))
    b = rng.standard_normal(5)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(got.data, naive_conv(x, w, b, 1, 0), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ShapeError, match="not integral"):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)


def test_conv_gradients_fd(rng):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    probe = rng.standard_normal((2, 3, 5, 5))
    ok, reps = gradcheck.fd_check(lambda: (T.conv2d(x, w, b, padding=1) * probe).sum(), [x, w, b])
    assert ok, reps


# --- backends -------------------------------------------------------------------
@pytest.mark.skipif(kernels.compiled_im2col is None, reason="compiled kernels not built")
@pytest.mark.parametrize("shape,k,stride", [((2, 3, 6, 6), 3, 1), ((1, 4, 7, 7), 3, 2), ((3, 2, 5, 5), 1, 1)])
def test_backends_bit_identical(rng, shape, k, stride):
    xp = rng.standard_normal(shape)
    ho = (shape[2] - k) // stride + 1
    a = kernels.compiled_im2col(xp, k, stride, ho, ho)
    b = kernels.fallback_im2col(xp, k, stride, ho, ho)
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape)
    args = (cols, shape[0], shape[1], shape[2], shape[3], k, stride, ho, ho)
    assert np.array_equal(kernels.compiled_col2im(*args), kernels.fallback_col2im(*args))


def test_use_backend_switch(rng):
    before = kernels.BACKEND
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    outs = []
    for name in ("numpy",) + (("cython",) if kernels.compiled_im2col is not None else ()):
        kernels.use_backend(name)
        x.grad = None
        y = T.conv2d(x, w, padding=1)
        y.sum().backward()
        outs.append((y.data.copy(), x.grad.copy()))
    kernels.use_backend(before)
    for o in outs[1:]:
        assert np.array_equal(o[0], outs[0][0]) and np.array_equal(o[1], outs[0][1])
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


# --- relu / gap -------------------------------------------------------------------
def test_relu_values_and_zero_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    y = T.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    y.sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_relu_all_negative(rng):
    x = Tensor(-rng.uniform(0.1, 1, (3, 4)), requires_grad=True)
    y = T.relu(x)
    y.sum().backward()
    assert not y.data.any() and not x.grad.any()


@given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)))
@settings(max_examples=50, deadline=None)
def test_relu_elementwise_oracle(a):
    assert np.array_equal(T.relu(Tensor(a)).data, np.where(a > 0, a, 0.0))


def test_gap_values(rng):
    assert T.gap(Tensor(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2))).data.tolist() == [[2.5]]
    assert np.all(T.gap(Tensor(np.full((2, 3, 4, 4), 1.75))).data == 1.75)
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(T.gap(Tensor(x)).data, x.mean(axis=(2, 3)), atol=1e-15)


def test_gap_backward_uniform(rng):
    x = Tensor(rng.standard_normal((2, 3, 2, 3)), requires_grad=True)
    g = rng.standard_normal((2, 3))
    T.gap(x).backward(g)
    np.testing.assert_allclose(x.grad, np.broadcast_to(g[:, :, None, None] / 6, x.shape))


# --- backward --------------------------------------------------------------------
def test_backward_sum_all_ones(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_zero_times(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    (x * 0.0).sum().backward()
    assert np.array_equal(x.grad, np.zeros(5))


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward_accumulates(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    assert np.array_equal(x.grad, np.full(4, 6.0))
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros(4))


def test_backward_linear_in_upstream(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    g = rng.standard_normal((1, 3, 5, 5))
    T.relu(T.conv2d(x, w, padding=1)).backward(g)
    g1 = w.grad.copy()
    w.grad = None
    x.grad = None
    T.relu(T.conv2d(x, w, padding=1)).backward(2 * g)
    assert np.array_equal(w.grad, 2 * g1)


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_forward_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(a, b)


def test_tape_topological(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = T.exp(x) * x + T.log(T.exp(x))
    tape = T.Tape.from_output(y.sum())
    pos = {id(n.output): i for i, n in enumerate(tape)}
    for i, node in enumerate(tape):
        for inp in node.inputs:
            if inp.node is not None:
                assert pos[id(inp)] < i


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: (a * b + a / (T.absolute(b) + 1.0)).sum(),
        lambda a, b: (T.sqrt(a * a + 1.0) - T.exp(b * 0.1)).mean(),
        lambda a, b: T.log_softmax(a).sum() * 0.3 + (a @ b.T).sum(),
        lambda a, b: T.row_norms(a).sum() + T.concat([a, b], axis=0).mean() + a[1].sum(),
        lambda a, b: T.clamp_min(a - b, 0.1).sum() + (a ** 3).sum() + a.T.reshape(-1).sum(),
    ],
)
def test_elementwise_ops_fd(rng, fn):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    ok, reps = gradcheck.fd_check(lambda: fn(a, b), [a, b])
    assert ok, reps


def test_norm_and_pool_ops_fd(rng):
    x = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = Tensor(rng.standard_normal(2), requires_grad=True)
    wmix = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    probe = rng.standard_normal((3, 3, 2, 2))

    def f():
        out, _, _ = T.batch_norm(x, gamma, beta, 1e-5)
        y = T.channel_affine(out, gamma, beta)
        return (T.avg_pool2d(T.channel_mix(y, wmix), 2) * probe).sum()

    ok, reps = gradcheck.fd_check(f, [x, gamma, beta, wmix])
    assert ok, reps


# --- fd_check ---------------------------------------------------------------------
def test_fd_check_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    ok, reps = gradcheck.fd_check(lambda: x * x, [x])
    assert ok and abs(reps[0].numeric - 6.0) < 1e-8 and reps[0].analytic == 6.0


def test_fd_check_constant():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ok, reps = gradcheck.fd_check(lambda: (x * 0.0).sum() + 4.0, [x])
    assert ok and reps[0].analytic == 0.0 and reps[0].numeric == 0.0


def test_fd_check_group_lasso(rng):
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    ok, reps = gradcheck.fd_check(lambda: T.row_norms(w).sum(), [w], tol=1e-5)
    assert ok
    w.grad = None
    T.row_norms(w).sum().backward()
    np.testing.assert_allclose(w.grad, w.data / np.linalg.norm(w.data, axis=1, keepdims=True), atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_check_flags_nonfinite():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    ok, reps = gradcheck.fd_check(lambda: T.log(T.absolute(x)).sum(), [x])
    assert not ok and reps[0].nonfinite >= 1


def test_fd_check_rejects_bad_step():
    x = Tensor(np.array(1.0), requires_grad=True)
    with pytest.raises(ValueError):
        gradcheck.fd_check(lambda: x * x, [x], h=0)
