import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import conv2d_loops
from mvksr import tensor as T
from mvksr.gradcheck import grad_check, projected, rel_err
from mvksr.optim import AdamState, MissingGradError, adam_step, param_set
from mvksr.tensor import ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- conv2d


def test_conv_all_ones_center_is_nine():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 1, 1] == 9.0


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_conv_identity_kernel(rng, d):
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    x = rng.standard_normal((2, 1, 9, 7))
    out = T.conv2d(Tensor(x), Tensor(w), dilation=d, padding=d)
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_nested_loops(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for pad in (0, 2):
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=2, padding=pad).data
        np.testing.assert_allclose(got, conv2d_loops(x, w, b, 2, pad), atol=1e-10, rtol=0)


@settings(max_examples=20, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    o=st.integers(1, 3),
    k=st.sampled_from([1, 3, 5]),
    d=st.integers(1, 3),
    h=st.integers(1, 7),
    w=st.integers(1, 7),
    seed=st.integers(0, 2**16),
)
def test_conv_shapes_and_values_property(n, c, o, k, d, h, w, seed):
    r = np.random.default_rng(seed)
    pad = d * (k - 1) // 2
    x = r.standard_normal((n, c, h, w))
    wt = r.standard_normal((o, c, k, k))
    out = T.conv2d(Tensor(x), Tensor(wt), dilation=d, padding=pad)
    assert out.shape == (n, o, h, w)
    np.testing.assert_allclose(out.data, conv2d_loops(x, wt, None, d, pad), atol=1e-10)


@pytest.mark.parametrize("d", [1, 2, 4])
def test_conv_receptive_field_span(d):
    k = 3
    size = 2 * d * (k - 1) + 5
    x = np.zeros((1, 1, size, size))
    c = size // 2
    x[0, 0, c, c] = 1.0
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, k, k))), dilation=d, padding=d * (k - 1) // 2)
    rows = np.nonzero(out.data[0, 0].any(axis=1))[0]
    assert rows.max() - rows.min() + 1 == d * (k - 1) + 1


def test_conv_shape_errors_name_dimension():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="odd"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))


def test_conv_is_pure(rng):
    x, w = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), dilation=2, padding=2).data
    b = T.conv2d(Tensor(x), Tensor(w), dilation=2, padding=2).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- resampling


def test_downsample_block_mean():
    x = Tensor(np.array([[0.0, 0.0], [0.0, 4.0]]).reshape(1, 1, 2, 2))
    assert T.downsample_avg2(x).data.item() == 1.0


def test_downsample_constant():
    out = T.downsample_avg2(Tensor(np.full((1, 2, 6, 4), 0.3)))
    assert out.shape == (1, 2, 3, 2)
    np.testing.assert_allclose(out.data, 0.3)


def test_downsample_odd_raises():
    with pytest.raises(ShapeError):
        T.downsample_avg2(Tensor(np.zeros((1, 1, 5, 4))))


def test_upsample_replicates():
    out = T.upsample_nearest2(Tensor(np.full((1, 1, 1, 1), 3.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**16))
def test_down_of_up_is_identity(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, h, w))
    back = T.downsample_avg2(T.upsample_nearest2(Tensor(x))).data
    np.testing.assert_array_equal(back, x)


@pytest.mark.parametrize("op,shape", [(T.downsample_avg2, (2, 3, 4, 6)), (T.upsample_nearest2, (2, 3, 3, 2))])
def test_resample_gradients(rng, op, shape):
    rep = grad_check(projected(op), [leaf(rng.standard_normal(shape))], tolerance=1e-6)
    assert rep.passed, rep


# ---------------------------------------------------------------- layer norm / prelu


def test_layer_norm_constant_gives_zero():
    out = T.layer_norm(Tensor(np.full((2, 3, 4, 4), 7.0)), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_two_values():
    x = np.ones((1, 2, 2, 2))
    x[:, :, 0] = 3.0
    out = T.layer_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    np.testing.assert_allclose(np.abs(out.data), 1.0, atol=1e-5)


def test_layer_norm_statistics(rng):
    # eps biases the variance by about eps/var, so use a wide input
    x = rng.standard_normal((3, 4, 8, 8)) * 10 + 5
    out = T.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data.reshape(3, -1)
    assert np.abs(out.mean(axis=1)).max() < 1e-10
    assert np.abs(out.var(axis=1) - 1).max() < 1e-6


def test_layer_norm_gradient(rng):
    ins = [leaf(rng.standard_normal((2, 3, 4, 4))), leaf(1 + 0.2 * rng.standard_normal(3)), leaf(rng.standard_normal(3))]
    rep = grad_check(projected(T.layer_norm), ins)
    assert rep.passed, rep


def test_prelu_values():
    s = Tensor(np.array([0.25]))
    assert T.prelu(Tensor(np.array([[2.0]])), s).data.item() == 2.0
    assert T.prelu(Tensor(np.array([[-2.0]])), s).data.item() == -0.5


def test_prelu_slope_derivative():
    s = leaf([0.25])
    out = T.prelu(Tensor(np.array([[-2.0]])), s)
    T.backward(out.sum())
    assert s.grad.item() == -2.0
    h = 1e-6
    num = (T.prelu(Tensor(np.array([[-2.0]])), Tensor(np.array([0.25 + h]))).data - T.prelu(Tensor(np.array([[-2.0]])), Tensor(np.array([0.25 - h]))).data) / (2 * h)
    assert abs(num.item() + 2.0) < 1e-8


# ---------------------------------------------------------------- concat / misc ops


def test_concat_shape_and_slices(rng):
    a, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 4, 4))
    c = T.concat_channels(Tensor(a), Tensor(b))
    assert c.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(T.slice_channels(c, 0, 2).data, a)
    np.testing.assert_array_equal(T.slice_channels(c, 2, 5).data, b)


def test_concat_mismatch_raises():
    with pytest.raises(ShapeError, match="dim"):
        T.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))))


def test_concat_gradient(rng):
    rep = grad_check(projected(T.concat_channels), [leaf(rng.standard_normal((2, 2, 3, 3))), leaf(rng.standard_normal((2, 1, 3, 3)))])
    assert rep.passed, rep


@pytest.mark.parametrize(
    "name,fn,make",
    [
        ("sigmoid", T.sigmoid, lambda r: r.standard_normal((3, 4)) * 4),
        ("exp", T.exp, lambda r: r.standard_normal((3, 4))),
        ("log", T.log, lambda r: r.uniform(0.1, 2, (3, 4))),
        ("square", T.square, lambda r: r.standard_normal((3, 4))),
        ("pow", lambda x: T.pow_scalar(x, 1.7), lambda r: r.uniform(0.1, 2, (3, 4))),
        ("flip", lambda x: T.flip(x, 1), lambda r: r.standard_normal((3, 4))),
    ],
)
def test_unary_gradients(rng, name, fn, make):
    rep = grad_check(projected(fn), [leaf(make(rng))])
    assert rep.passed, (name, rep)


def test_broadcast_binary_gradients(rng):
    a, b = leaf(rng.standard_normal((2, 1, 3))), leaf(rng.uniform(0.5, 2, (1, 4, 3)))
    rep = grad_check(projected(lambda a, b: (a * b - a) / b + b), [a, b])
    assert rep.passed, rep


def test_sigmoid_is_stable_at_extremes():
    out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 0.5 and out[2] == 1.0


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones(rng):
    x = leaf(rng.standard_normal((3, 4)))
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square(rng):
    x = leaf(rng.standard_normal((3, 4)))
    T.backward((x * x).sum() * 0.5)
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=0)


def test_backward_accumulates(rng):
    x = leaf(rng.standard_normal(5))
    T.backward(x.sum())
    T.backward((x * 2.0).sum())
    np.testing.assert_array_equal(x.grad, np.full(5, 3.0))


def test_backward_nonscalar_raises():
    with pytest.raises(ShapeError):
        T.backward(leaf(np.ones(3)) * 2.0)


def test_backward_shared_subexpression():
    x = leaf([2.0])
    y = x * x
    T.backward((y + y * x).sum())  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad.item() == 2 * 2 + 3 * 4


def test_grad_shape_matches_data(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 4)))
    w = leaf(rng.standard_normal((5, 3, 3, 3)))
    T.backward(T.conv2d(x, w, padding=1).sum())
    assert x.grad.shape == x.shape and w.grad.shape == w.shape


def test_debug_mode_flags_nonfinite(monkeypatch):
    monkeypatch.setattr(T, "_DEBUG", True)
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.log(Tensor(np.array([-1.0])))


# ---------------------------------------------------------------- grad_check harness


def test_gradcheck_linear_is_exact(rng):
    w = rng.standard_normal((3, 4))
    rep = grad_check(lambda ins: (ins[0] * Tensor(w)).sum(), [leaf(rng.standard_normal((3, 4)))])
    assert rep.max_rel_err < 1e-9


def test_gradcheck_reports_failure_without_raising():
    def wrong(ins):
        x = ins[0]
        return T._result(np.sum(x.data**2), (x,), lambda g: (g * np.ones_like(x.data),))

    rep = grad_check(wrong, [leaf([1.0, 2.0, 3.0])])
    assert not rep.passed and rep.worst_input == 0 and rep.worst_index is not None


def test_gradcheck_prelu_kink_is_excluded():
    x = leaf([[0.0], [1.0], [-1.0]])  # three samples, one channel
    s = leaf([0.25])
    rep = grad_check(projected(T.prelu), [x, s], exclude=lambda ii, idx, v: ii == 0 and v == 0.0)
    assert rep.passed, rep
    assert rep.checked == 3  # two x coordinates plus the slope


def test_rel_err_floor():
    assert rel_err(0.0, 1e-9) < 1e-2
    assert rel_err(1.0, 1.0) == 0.0


# ---------------------------------------------------------------- Adam


def test_param_set_is_sorted():
    ps = param_set([("b", leaf([1.0])), ("a", leaf([2.0]))])
    assert list(ps) == ["a", "b"]


def test_adam_zero_gradient_keeps_params():
    p = leaf([1.5, -2.0])
    p.grad = np.zeros(2)
    st = AdamState()
    adam_step({"p": p}, st)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert st.t == 1


@pytest.mark.parametrize("g", [1e-6, 0.3, -7.0, 1e4])
def test_adam_first_step_is_lr(g):
    p = leaf([0.0])
    p.grad = np.array([g])
    st = AdamState(lr=1e-3, eps=0.0)
    adam_step({"p": p}, st)
    assert abs(p.data[0]) == pytest.approx(1e-3, rel=1e-12)


def test_adam_converges_on_quadratic():
    th = leaf([0.0])
    st = AdamState(lr=0.1)
    for _ in range(100):
        loss = T.square(th - 3.0).sum()
        T.backward(loss)
        adam_step({"th": th}, st)
    assert abs(th.data[0] - 3.0) < 0.05


def test_adam_missing_grad_names_param():
    with pytest.raises(MissingGradError, match="weights.w"):
        adam_step({"weights.w": leaf([1.0])}, AdamState())


def test_adam_zeroes_grads():
    p = leaf([1.0])
    p.grad = np.array([2.0])
    adam_step({"p": p}, AdamState())
    assert p.grad[0] == 0.0
