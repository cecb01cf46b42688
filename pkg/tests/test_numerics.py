import numpy as np
import pytest

from fsuda import numerics as nx
from fsuda.verify import naive_conv2d, naive_matmul


def T(a, grad=False):
    return nx.Tensor(a, requires_grad=grad)


def test_matmul_identity_and_scalar(f64):
    B = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(nx.matmul(T(np.eye(3)), T(B)).data, B)
    assert nx.matmul(T([[2.0]]), T([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop(f64, rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    np.testing.assert_allclose(nx.matmul(T(a), T(b)).data, naive_matmul(a, b), atol=1e-6)


def test_matmul_shape_mismatch_reports_dimensions():
    with pytest.raises(ValueError, match="3 columns"):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((4, 2))))


def test_conv2d_center_kernel_is_identity(f64, rng):
    x = rng.normal(size=(5, 6, 1))
    w = np.zeros((3, 3, 1, 1))
    w[1, 1] = 1.0
    np.testing.assert_allclose(nx.conv2d(T(x), T(w), 1, 1).data, x)


def test_conv2d_zero_input():
    out = nx.conv2d(T(np.zeros((4, 4, 2))), T(np.ones((3, 3, 2, 3))), 1, 1)
    assert not out.data.any()


def test_conv2d_direct_summation(f64):
    x = np.arange(9.0).reshape(3, 3, 1)
    w = np.array([1.0, 2.0, -1.0, 0.5]).reshape(2, 2, 1, 1)
    expected = [[0 + 2 * 1 - 3 + 0.5 * 4, 1 + 2 * 2 - 4 + 0.5 * 5],
                [3 + 2 * 4 - 6 + 0.5 * 7, 4 + 2 * 5 - 7 + 0.5 * 8]]
    np.testing.assert_allclose(nx.conv2d(T(x), T(w)).data[..., 0], expected)


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_matches_naive(f64, seed):
    rng = np.random.default_rng(seed)
    H, W, cin, cout = rng.integers(3, 9, size=2).tolist() + rng.integers(1, 4, size=2).tolist()
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, w = rng.normal(size=(H, W, cin)), rng.normal(size=(3, 3, cin, cout))
    np.testing.assert_allclose(nx.conv2d(T(x), T(w), stride, pad).data, naive_conv2d(x, w, stride, pad), atol=1e-6)


def test_conv2d_rejects_stride_zero():
    with pytest.raises(ValueError):
        nx.conv2d(T(np.ones((3, 3, 1))), T(np.ones((2, 2, 1, 1))), stride=0)


def test_relu_values_and_mask(f64):
    x = T([-1.0, 0.0, 2.0], grad=True)
    y = nx.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    y.sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]
    assert nx.relu(T([1.0, 2.5])).data.tolist() == [1.0, 2.5]


def test_pool2d_constant_and_ceil_extents():
    const = np.full((4, 6, 3), 2.5)
    out = nx.pool2d(T(const), "max", 2, 2)
    assert out.shape == (2, 3, 3) and np.all(out.data == 2.5)
    assert nx.pool2d(T(np.ones((5, 5, 1))), "max", 2, 2, ceil_mode=True).shape == (3, 3, 1)


def test_avg_pool_divides_by_actual_count(f64):
    x = np.arange(25.0).reshape(5, 5, 1)
    out = nx.pool2d(T(x), "avg", 2, 2, ceil_mode=True).data[..., 0]
    assert out[2, 2] == 24.0
    assert out[0, 2] == (4 + 9) / 2


def test_adaptive_avg_to_one_is_global_mean(f64, rng):
    x = rng.normal(size=(5, 7, 3))
    np.testing.assert_allclose(nx.adaptive_avg_pool2d(T(x), 1, 1).data[0, 0], x.mean(axis=(0, 1)))


def test_l2_normalize_rows(f64):
    unit = np.array([[0.6, 0.8]])
    np.testing.assert_allclose(nx.l2_normalize_rows(T(unit)).data, unit)
    np.testing.assert_allclose(nx.l2_normalize_rows(T(5 * unit)).data, unit)
    zero = nx.l2_normalize_rows(T(np.zeros((2, 3))))
    assert np.all(zero.data == 0)


def test_zero_row_gradient_is_finite(f64):
    x = T(np.zeros((1, 3)), grad=True)
    nx.l2_normalize_rows(x).sum().backward()
    assert np.all(np.isfinite(x.grad))


def test_gradient_check_square(f64):
    x = T([3.0], grad=True)
    assert nx.gradient_check(lambda: (x * x).sum(), [x]) < 1e-9


def test_gradient_check_flags_corrupted_gradient(f64):
    x = T([3.0], grad=True)

    def corrupted():
        y = x * x
        return nx.Tensor._make(y.data, (x,), lambda g: (g * 2 * x.data * 1.01,))

    assert nx.gradient_check(corrupted, [x]) >= 5e-3


def test_gradient_check_rejects_nonfinite(f64):
    x = T([0.0], grad=True)
    with pytest.raises(FloatingPointError):
        nx.gradient_check(lambda: nx.Tensor._make(np.array(np.nan), (x,), lambda g: (g,)), [x])


def test_gradient_check_requires_64_bit():
    with nx.precision("float32"):
        x = T([3.0], grad=True)
        with pytest.raises(ValueError):
            nx.gradient_check(lambda: (x * x).sum(), [x])


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_random_shapes(f64, seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 6, size=3)
    a, b = T(rng.normal(size=(m, k)), True), T(rng.normal(size=(k, n)), True)
    assert nx.gradient_check(lambda: (nx.matmul(a, b) ** 2).sum(), [a, b]) < 1e-3
    H, W = rng.integers(3, 7, size=2)
    x = T(rng.normal(size=(H, W, 2)), True)
    w = T(rng.normal(size=(3, 3, 2, 2)), True)
    proj = T(rng.normal(size=(H, W, 2)))
    assert nx.gradient_check(lambda: (nx.conv2d(x, w, 1, 1) * proj).sum(), [x, w], step=1e-5) < 1e-3
    assert nx.gradient_check(lambda: (nx.pool2d(nx.relu(x), "max", 2, 2, True) ** 2).sum(), [x], step=1e-6) < 1e-3
    assert nx.gradient_check(lambda: (nx.pool2d(x, "avg", 2, 2, True) ** 2).sum(), [x]) < 1e-3
    r = T(rng.normal(size=(m, k + 1)), True)
    c = T(rng.normal(size=(m, k + 1)))
    assert nx.gradient_check(lambda: (nx.l2_normalize_rows(r) * c).sum(), [r]) < 1e-3
    assert nx.gradient_check(lambda: (nx.log_softmax(r) * c).sum(), [r]) < 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_output_rejected_in_verification_mode(f64):
    with pytest.raises(nx.NonFiniteError):
        nx.log(T([0.0, 1.0]))


def test_paramtape_zeroes_gradients(f64):
    tape = nx.ParamTape()
    p = tape.register("w", T(np.ones((2, 2))))
    tape.backward((p * 3.0).sum())
    assert np.all(p.grad == 3.0)
    tape.zero_grad()
    assert p.grad.shape == (2, 2) and not p.grad.any()


def test_broadcast_add_gradient(f64, rng):
    a = T(rng.normal(size=(3, 4)), True)
    b = T(rng.normal(size=(4,)), True)
    assert nx.gradient_check(lambda: ((a + b) ** 2).sum(), [a, b]) < 1e-6


def test_step_decay_schedule():
    assert nx.step_decay(1e-4, 2500) == pytest.approx(2.5e-5)
    assert nx.step_decay(1e-4, 999) == 1e-4
