import numpy as np
import pytest

from rvdet import grad
from rvdet.grad import ContractError, ShapeError, Tensor


def _leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def test_add_mul_hand_gradients():
    x, y = _leaf([1.0, -2.0, 3.0]), _leaf([4.0, 5.0, -6.0])
    grad.tsum(grad.mul(x, y)).backward()
    assert np.allclose(x.grad, [4.0, 5.0, -6.0])
    assert np.allclose(y.grad, [1.0, -2.0, 3.0])

    x.zero_grad()
    grad.tsum(grad.add(grad.mul(x, 3.0), 1.0)).backward()
    assert np.allclose(x.grad, [3.0, 3.0, 3.0])


def test_unbroadcast_bias_row_sum():
    x = _leaf(np.arange(6.0).reshape(2, 3))
    b = _leaf([1.0, 2.0, 3.0])
    grad.tsum(grad.add(x, b)).backward()
    assert np.allclose(x.grad, np.ones((2, 3)))
    assert np.allclose(b.grad, [2.0, 2.0, 2.0])  # summed over the 2 rows


def test_unbroadcast_scalar():
    s = _leaf(2.0)
    x = Tensor(np.ones((3, 4)))
    grad.tsum(grad.mul(x, s)).backward()
    assert s.grad == pytest.approx(12.0)


def test_matmul_hand_gradient():
    a = _leaf([[1.0, 2.0], [3.0, 4.0]])
    b = _leaf([[5.0, 6.0], [7.0, 8.0]])
    grad.tsum(grad.matmul(a, b)).backward()
    # dL/dA = ones @ B^T, dL/dB = A^T @ ones
    assert np.allclose(a.grad, np.ones((2, 2)) @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ np.ones((2, 2)))


def test_relu_kink_and_sign():
    x = _leaf([-1.0, 0.0, 2.0])
    grad.tsum(grad.relu(x)).backward()
    assert np.allclose(x.grad, [0.0, 0.0, 1.0])  # derivative 0 at the kink


def test_sigmoid_value_and_gradient():
    x = _leaf([0.0, 100.0, -100.0])
    s = grad.sigmoid(x)
    assert np.allclose(s.data, [0.5, 1.0, 0.0])
    grad.tsum(s).backward()
    assert x.grad[0] == pytest.approx(0.25)
    assert abs(x.grad[1]) < 1e-30 and abs(x.grad[2]) < 1e-30


def test_log_power_gradients():
    x = _leaf([0.5, 2.0])
    grad.tsum(grad.log(x)).backward()
    assert np.allclose(x.grad, [2.0, 0.5])
    x.zero_grad()
    grad.tsum(grad.power(x, 3.0)).backward()
    assert np.allclose(x.grad, 3.0 * x.data**2)


def test_clip_blocks_gradient_at_bounds():
    x = _leaf([0.0, 0.5, 1.0, 2.0])
    grad.tsum(grad.clip(x, 0.0, 1.0)).backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0, 0.0])


def test_maximum_tie_goes_first():
    a, b = _leaf([1.0, 5.0]), _leaf([1.0, 2.0])
    grad.tsum(grad.maximum(a, b)).backward()
    assert np.allclose(a.grad, [1.0, 1.0])
    assert np.allclose(b.grad, [0.0, 0.0])


def test_smooth_l1_values_and_gradient():
    x = _leaf([-2.0, -0.5, 0.5, 3.0])
    y = grad.smooth_l1(x)
    assert np.allclose(y.data, [1.5, 0.125, 0.125, 2.5])
    grad.tsum(y).backward()
    assert np.allclose(x.grad, [-1.0, -0.5, 0.5, 1.0])


def test_gather_scatter_adds_duplicates():
    x = _leaf([[1.0], [2.0], [3.0]])
    grad.tsum(grad.gather(x, [0, 0, 2])).backward()
    assert np.allclose(x.grad, [[2.0], [0.0], [1.0]])


def test_concat_splits_gradient():
    a, b = _leaf([1.0, 2.0]), _leaf([3.0])
    grad.tsum(grad.mul(grad.concat([a, b]), [1.0, 2.0, 3.0])).backward()
    assert np.allclose(a.grad, [1.0, 2.0])
    assert np.allclose(b.grad, [3.0])


def test_reuse_accumulates():
    x = _leaf([3.0])
    grad.tsum(grad.mul(x, x)).backward()
    assert np.allclose(x.grad, [6.0])  # d(x^2)/dx


def test_tmean_axis():
    x = _leaf(np.arange(6.0).reshape(2, 3))
    grad.tsum(grad.tmean(x, axis=0)).backward()
    assert np.allclose(x.grad, np.full((2, 3), 0.5))


def test_shape_errors():
    with pytest.raises(ShapeError):
        grad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        grad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        grad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


def test_contract_errors():
    with pytest.raises(ContractError):
        Tensor(np.ones(3), requires_grad=True).backward()
    with pytest.raises(ContractError):
        grad.grad_check(lambda t: grad.tsum(t), Tensor(np.ones(2)), eps=0.0)
    with pytest.raises(ContractError):
        grad.grad_check(lambda t: t, Tensor(np.ones(2)))  # non-scalar output


def test_grad_check_random_composites():
    # kink-free compositions so central differences are trustworthy
    rng = np.random.default_rng(20)
    w = rng.normal(0.0, 1.0, (4, 3))

    def f_affine_sigmoid(t):
        return grad.tsum(grad.sigmoid(grad.affine(t, Tensor(w), Tensor(np.zeros(3)))))

    def f_log_clip(t):
        shifted = grad.add(grad.mul(grad.sigmoid(t), 0.8), 0.1)
        return grad.tsum(grad.log(shifted))

    def f_smooth_l1(t):
        return grad.tsum(grad.smooth_l1(grad.add(t, -0.3)))

    for i in range(10):
        x = Tensor(rng.normal(0.0, 2.0, (5, 4)))
        assert grad.grad_check(f_affine_sigmoid, x) < 1e-6
        y = Tensor(rng.normal(0.0, 2.0, (6,)))
        assert grad.grad_check(f_log_clip, y) < 1e-6
        # keep clear of the smooth-l1 kinks at |x| = 1
        z = rng.normal(0.0, 2.0, (7,))
        z[np.abs(np.abs(z - 0.3) - 1.0) < 1e-3] += 0.01
        assert grad.grad_check(f_smooth_l1, Tensor(z)) < 1e-6


def test_backward_with_seed():
    x = _leaf([1.0, 2.0])
    y = grad.mul(x, 3.0)
    y.backward(seed=np.array([1.0, 10.0]))
    assert np.allclose(x.grad, [3.0, 30.0])
