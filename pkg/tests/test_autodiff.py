import numpy as np
import pytest

from mtlmi import autodiff as ad
from mtlmi.autodiff import BatchNormState, Tape, Tensor, gradient_check
from mtlmi.errors import ContractError, DimensionError


def test_conv2d_all_ones():
    inp = Tensor(np.ones((1, 1, 3, 3)))
    kernel = Tensor(np.ones((1, 1, 3, 3)))
    bias = Tensor(np.zeros(1))
    out = ad.conv2d(inp, kernel, bias)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_stride_shape():
    inp = Tensor(np.zeros((1, 3, 32, 32)))
    kernel = Tensor(np.zeros((16, 3, 3, 3)))
    out = ad.conv2d(inp, kernel, Tensor(np.zeros(16)), stride=2, padding=1)
    assert out.shape == (1, 16, 16, 16)


def test_conv2d_channel_mismatch():
    inp = Tensor(np.zeros((1, 3, 8, 8)))
    kernel = Tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(DimensionError):
        ad.conv2d(inp, kernel, Tensor(np.zeros(4)))


def test_conv2d_kernel_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    inp = Tensor(rng.standard_normal((1, 2, 5, 5)))
    kernel = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    bias = Tensor(np.zeros(3), requires_grad=True)

    def f():
        out = ad.conv2d(inp, kernel, bias, stride=1, padding=0)
        return ad.multiply_scalar(ad.mean(out), out.size)

    assert gradient_check(f, [kernel, bias], step=1e-5) < 1e-5


def test_leaky_relu_values():
    x = Tensor([-1.0, 2.5])
    out = ad.leaky_relu(x, 0.01)
    assert out.data[0] == pytest.approx(-0.01)
    assert out.data[1] == 2.5


def test_leaky_relu_negative_slope_is_alpha():
    x = Tensor([-1.0], requires_grad=True)
    with Tape() as tape:
        out = ad.mean(ad.leaky_relu(x, 0.2))
        grads = tape.backward(out)
    assert grads[x][0] == pytest.approx(0.2)


def test_leaky_relu_alpha_range():
    with pytest.raises(ContractError):
        ad.leaky_relu(Tensor([1.0]), alpha=1.5)


def test_softplus_closed_forms():
    x = Tensor([0.0, 100.0, -np.log(3.0)])
    out = ad.softplus(x)
    assert out.data[0] == pytest.approx(np.log(2.0), abs=1e-12)
    assert out.data[1] == pytest.approx(100.0, abs=1e-12)
    assert out.data[2] == pytest.approx(np.log(4.0 / 3.0), abs=1e-12)


def test_softplus_bounds_on_grid():
    v = np.linspace(-50.0, 50.0, 2001)
    out = ad.softplus(Tensor(v)).data
    relu = np.maximum(0.0, v)
    assert np.all(out >= relu)
    assert np.all(out - relu <= np.log(2.0) + 1e-15)


def test_batch_norm_constant_input_is_zero():
    x = Tensor(np.full((4, 2, 3, 3), 7.0))
    out = ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        BatchNormState.create(2))
    assert np.allclose(out.data, 0.0)


def test_batch_norm_beta_shifts_mean():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)))
    out = ad.batch_norm(x, Tensor(np.ones(3)), Tensor(np.full(3, 5.0)),
                        BatchNormState.create(3))
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 5.0)


def test_batch_norm_single_value_per_channel_rejected():
    x = Tensor(np.zeros((1, 2, 1, 1)))
    with pytest.raises(ContractError):
        ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      BatchNormState.create(2))


def test_batch_norm_gradient_check():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.standard_normal(3), requires_grad=True)
    beta = Tensor(rng.standard_normal(3), requires_grad=True)
    state = BatchNormState.create(3)

    def f():
        out = ad.batch_norm(x, gamma, beta, state.copy(), mode="train")
        return ad.mean(ad.softplus(out))

    assert gradient_check(f, [x, gamma, beta], step=1e-5) < 1e-4


def test_batch_norm_eval_uses_running_stats():
    state = BatchNormState(np.array([1.0, 2.0]), np.array([4.0, 9.0]))
    x = Tensor(np.ones((1, 2, 2, 2)))
    out = ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        state, mode="eval", epsilon=0.0)
    assert np.allclose(out.data[0, 0], 0.0)
    assert np.allclose(out.data[0, 1], -1.0 / 3.0)


def test_global_average_pool_values():
    x = Tensor(np.arange(64 * 64, dtype=float).reshape(1, 64, 8, 8))
    out = ad.global_average_pool(x)
    assert out.shape == (1, 64)
    assert np.allclose(out.data[0], x.data[0].mean(axis=(1, 2)))


def test_log_softmax_uniform():
    for k in (3, 7):
        out = ad.log_softmax(Tensor(np.zeros((2, k))))
        assert np.allclose(out.data, -np.log(k))


def test_matmul_gradient_check():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    f = lambda: ad.mean(ad.matmul(a, b))
    assert gradient_check(f, [a, b], step=1e-5) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_gradient_check_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)

    def f():
        return ad.multiply_scalar(ad.mean(ad.multiply(x, x)), 3.0)

    with Tape() as tape:
        grads = tape.backward(f())
    assert np.allclose(grads[x], [2.0, 4.0, 6.0])
    assert gradient_check(f, x, step=1e-5) < 1e-8


def test_gradient_check_softplus_sum():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal(20), requires_grad=True)
    f = lambda: ad.mean(ad.softplus(x))
    assert gradient_check(f, x, step=1e-5) < 1e-6


def test_gradient_check_rejects_nonscalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ContractError):
        gradient_check(lambda: ad.softplus(x), x, step=1e-5)


def test_gradient_check_rejects_bad_step():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ContractError):
        gradient_check(lambda: ad.mean(x), x, step=1e-2)


def test_forward_is_deterministic():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    a = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(4)), padding=1)
    b = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(4)), padding=1)
    assert np.array_equal(a.data, b.data)


def test_backward_visits_each_op_once():
    x = Tensor(np.arange(3.0), requires_grad=True)
    with Tape() as tape:
        y = ad.softplus(x)
        z = ad.add(y, y)
        out = ad.mean(z)
        recorded = len(tape)
        tape.backward(out)
    assert tape.backward_visits == recorded


def test_gradient_linearity():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal(10), requires_grad=True)
    with Tape() as tape:
        f1 = ad.mean(ad.softplus(x))
        f2 = ad.mean(ad.multiply(x, x))
        total = ad.add(f1, f2)
        g1 = tape.backward(f1)[x]
        g2 = tape.backward(f2)[x]
        gsum = tape.backward(total)[x]
    assert np.allclose(gsum, g1 + g2, atol=1e-12, rtol=0)


def test_primitive_gradients_at_many_random_points():
    # every elementwise primitive against central differences, 100 points each
    rng = np.random.default_rng(21)
    cases = [
        lambda t: ad.softplus(t),
        lambda t: ad.leaky_relu(t, 0.05),
        lambda t: ad.multiply(t, t),
        lambda t: ad.multiply_scalar(t, -1.7),
        lambda t: ad.clip(t, -0.8, 0.8),
    ]
    for op in cases:
        x = Tensor(rng.uniform(-2.0, 2.0, size=100), requires_grad=True)
        # finite differences break exactly at kinks; nudge clear of them
        for kink in (0.0, -0.8, 0.8):
            close = np.abs(x.data - kink) < 1e-3
            x.data[close] += 5e-3
        f = lambda: ad.mean(op(x))
        assert gradient_check(f, x, step=1e-5) < 1e-4


def test_concat_and_flatten_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.zeros((2, 2)))
    c = ad.concat([a, b], axis=1)
    assert c.shape == (2, 5)
    d = ad.flatten(Tensor(np.zeros((2, 3, 4))))
    assert d.shape == (2, 12)


def test_gather_logit_out_of_range():
    with pytest.raises(ContractError):
        ad.gather_logit(Tensor(np.zeros((2, 3))), [0, 3])
