import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from freqmask import diffcore as dc
from freqmask.diffcore import Adam, AdamState, ContractError, DimensionError, Tensor, adam_step

from conftest import assert_grad_close, numeric_grad

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad for t in ts]


def check_fd(fn, *arrays, rtol=1e-4):
    """Compare backward() with central differences for every input of a scalar fn."""
    analytic = grad_of(fn, *arrays)
    for a, ga in zip(arrays, analytic):
        num = numeric_grad(lambda: fn(*[Tensor(b) for b in arrays]).item(), a)
        assert_grad_close(ga, num, rtol=rtol)


# -- matmul ---------------------------------------------------------------
def test_matmul_identity():
    out = dc.matmul(np.eye(2), np.array([[1.0, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = Tensor([[1.0, 0], [0, 0]]) @ Tensor([[5.0, 6], [7, 8]])
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    check_fd(lambda a, b: (a @ b).sum(), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        dc.matmul(np.zeros((3, 4)), np.zeros((3, 2)))


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    check_fd(lambda a, b: dc.square(a @ b).mean(), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


# -- conv1d ---------------------------------------------------------------
def test_conv1d_hand_example():
    np.testing.assert_array_equal(dc.conv1d(np.array([1.0, 2, 3]), np.array([1.0, 1])).data, [3, 5])


def test_conv1d_identity_kernel():
    x = np.random.default_rng(2).normal(size=(3, 10))
    np.testing.assert_array_equal(dc.conv1d(x, np.array([1.0])).data, x)


def test_conv1d_kernel_gradient_matches_fd():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=16), rng.normal(size=4)
    w = rng.normal(size=13)
    check_fd(lambda xx, kk: (dc.conv1d(xx, kk) * w).sum(), x, k)


@pytest.mark.parametrize("method", ["direct", "fft"])
def test_conv1d_filter_bank_gradients(method):
    rng = np.random.default_rng(4)
    x, k = rng.normal(size=(2, 3, 12)), rng.normal(size=(2, 5))
    w = rng.normal(size=(2, 3, 2, 8))
    check_fd(lambda xx, kk: (dc.conv1d(xx, kk, method=method) * w).sum(), x, k)


def test_conv1d_fft_path_matches_direct():
    rng = np.random.default_rng(5)
    x, k = rng.normal(size=(4, 3, 200)), rng.normal(size=(4, 16))
    np.testing.assert_allclose(dc.conv1d(x, k, "fft").data, dc.conv1d(x, k, "direct").data, atol=1e-12)


def test_conv1d_kernel_longer_than_signal():
    with pytest.raises(DimensionError):
        dc.conv1d(np.zeros(3), np.zeros(4))


# -- elementwise ----------------------------------------------------------
def test_sigmoid_at_zero():
    assert dc.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_extremes_are_finite():
    out = dc.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_l1_mean_hand_example():
    assert dc.l1_mean(Tensor([1.0, -1, 2, 0])).item() == 1.0


def test_mean_of_sigmoid_gradient():
    check_fd(lambda a: dc.mean(dc.sigmoid(a)), np.random.default_rng(6).normal(size=32))


def test_relu_subgradient_at_zero_is_zero():
    (g,) = grad_of(lambda a: dc.relu(a).sum(), np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g, [0, 0, 1])


def test_complex_abs_gradient_and_origin():
    rng = np.random.default_rng(7)
    check_fd(lambda r, i: dc.complex_abs(r, i).sum(), rng.normal(size=6), rng.normal(size=6))
    gr, gi = grad_of(lambda r, i: dc.complex_abs(r, i).sum(), np.zeros(2), np.zeros(2))
    assert np.all(gr == 0) and np.all(gi == 0)


@pytest.mark.parametrize("op", [dc.add, dc.sub, dc.mul, dc.div])
def test_binary_ops_with_broadcasting(op):
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(3, 4)), rng.uniform(1, 2, size=(4,))
    check_fd(lambda x, y: dc.square(op(x, y)).sum(), a, b)


def test_incompatible_shapes_raise():
    with pytest.raises(DimensionError):
        dc.add(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("fn", [
    lambda a: dc.exp(a).sum(),
    lambda a: dc.log(dc.exp(a) + 1.0).sum(),
    lambda a: dc.l1_mean(a),
    lambda a: dc.tsum(a, axis=1).mean(),
    lambda a: dc.mean(a, axis=0, keepdims=True).sum(),
    lambda a: dc.take(a, [0, 2, 2, 1], axis=1).sum(),
    lambda a: (dc.concat(dc.split(a, 2, axis=1)[::-1], axis=1) * np.arange(12.0).reshape(3, 4)).sum(),
    lambda a: (dc.log_softmax(a, axis=1) * np.arange(12.0).reshape(3, 4)).sum(),
])
def test_misc_op_gradients(fn):
    check_fd(fn, np.random.default_rng(9).normal(size=(3, 4)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5,), elements=finite), arrays(np.float64, (5,), elements=finite))
def test_mul_then_sum_gradient_is_other_operand(a, b):
    ga, _ = grad_of(lambda x, y: (x * y).sum(), a, b)
    np.testing.assert_array_equal(ga, b)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (6,), elements=finite))
def test_forward_ops_stay_finite(a):
    t = Tensor(a)
    for out in (dc.sigmoid(t), dc.relu(t), dc.exp(t), dc.log_softmax(dc.reshape(t, (2, 3)))):
        assert np.all(np.isfinite(out.data))


# -- cross entropy ------------------------------------------------------------
def test_cross_entropy_at_analytic_minimum():
    assert dc.cross_entropy(Tensor([[0.0, 0.0]]), [[0.5, 0.5]]).item() == pytest.approx(np.log(2), abs=1e-12)


def test_cross_entropy_uniform_prediction_hard_target():
    assert dc.cross_entropy(Tensor([[0.0, 0.0]]), [[1.0, 0.0]]).item() == pytest.approx(np.log(2), abs=1e-12)


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(4, 2))
    p = rng.dirichlet([1, 1], size=4)
    brute = np.mean([-sum(p[i, c] * (z[i, c] - np.log(np.exp(z[i]).sum())) for c in range(2)) for i in range(4)])
    assert dc.cross_entropy(Tensor(z), p).item() == pytest.approx(brute, abs=1e-10)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(11)
    p = rng.dirichlet([1, 1, 1], size=4)
    check_fd(lambda z: dc.cross_entropy(z, p), rng.normal(size=(4, 3)))


def test_cross_entropy_rejects_unnormalized_targets():
    with pytest.raises(ContractError):
        dc.cross_entropy(Tensor([[0.0, 0.0]]), [[0.5, 0.6]])


def test_cross_entropy_needs_two_classes():
    with pytest.raises(ContractError):
        dc.cross_entropy(Tensor([[0.0]]), [[1.0]])


# -- backward -------------------------------------------------------------
def test_square_gradient_at_three():
    (g,) = grad_of(lambda x: dc.square(x).sum(), np.array(3.0))
    assert g == 6.0


def test_linear_gradient_is_constant_operand():
    b = np.array([1.0, -2.0, 0.5])
    (g,) = grad_of(lambda a: (a * b).sum(), np.ones(3))
    np.testing.assert_array_equal(g, b)


def test_deep_composite_gradient():
    """conv -> relu -> matmul -> cross_entropy, every parameter."""
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 2, 20))
    p = rng.dirichlet([1, 1], size=3)

    def f(k, w, b):
        h = dc.relu(dc.conv1d(x, k) + 0.1)  # (3, 2, 2, 17)
        h = dc.reshape(dc.mean(h, axis=-1), (3, 4))
        return dc.cross_entropy(h @ w + b, p)

    check_fd(f, rng.normal(size=(2, 4)), rng.normal(size=(4, 2)), rng.normal(size=2), rtol=1e-3)


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_second_backward_raises():
    """Tape purity: the graph is consumed by the first backward."""
    x = Tensor(np.ones(3), requires_grad=True)
    loss = dc.square(x).sum()
    loss.backward()
    with pytest.raises(RuntimeError, match="already consumed"):
        loss.backward()


def test_shared_subexpression_visited_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == 8.0


def test_gradients_are_bit_deterministic():
    rng = np.random.default_rng(13)
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 2))
    g1 = grad_of(lambda x, y: dc.sigmoid(x @ y).mean(), a, b)
    g2 = grad_of(lambda x, y: dc.sigmoid(x @ y).mean(), a, b)
    for u, v in zip(g1, g2):
        assert np.array_equal(u, v)


# -- Adam ------------------------------------------------------------------
def test_adam_first_step_has_lr_magnitude():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState(0.01)
    adam_step(state, [p], [np.array([0.3, -5.0, 1e-3])])
    np.testing.assert_allclose(p, [1 - 0.01, -2 + 0.01, 3 - 0.01], rtol=0, atol=1e-7)
    assert state.step_count == 1


def test_adam_zero_gradient_is_fixed_point():
    p = np.array([1.0, 2.0])
    adam_step(AdamState(0.1), [p], [np.zeros(2)])
    np.testing.assert_array_equal(p, [1, 2])


def test_adam_converges_on_quadratic():
    w = Tensor(np.array(0.0), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        dc.square(w - 5.0).backward()
        opt.step()
    assert abs(w.item() - 5) < 0.5


def test_adam_length_mismatch():
    with pytest.raises(DimensionError):
        adam_step(AdamState(0.1), [np.zeros(2)], [])
    with pytest.raises(DimensionError):
        adam_step(AdamState(0.1), [np.zeros(2)], [np.zeros(3)])


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(learning_rate=0.1, beta1=1.0),
                                dict(learning_rate=0.1, epsilon=0.0)])
def test_adam_state_validation(kw):
    with pytest.raises(ContractError):
        AdamState(**kw)
