import numpy as np
import pytest

from morphtools import tensor as T
from morphtools.errors import TensorShapeError
from morphtools.tensor import Tensor


def test_add_values():
    assert np.array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(TensorShapeError, match=r"\(2,\).*\(3,\)"):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_scalar_operand_broadcasts_and_collects_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    s = Tensor(2.0, requires_grad=True)
    T.backward(T.sum_(x * s))
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])
    assert s.grad == pytest.approx(6.0)


def test_abs_gradient_at_negative_input():
    x = Tensor(-2.0, requires_grad=True)
    T.backward(T.elementwise("abs", x))
    assert x.grad == -1.0


def test_division_by_zero_raises():
    with pytest.raises(ZeroDivisionError, match="division by zero"):
        T.div(Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow"])
def test_binary_ops_match_finite_differences(rng, op):
    b = rng.uniform(0.5, 1.0, size=5)
    x = rng.uniform(0.2, 1.0, size=5)
    error = T.grad_check(lambda t: T.sum_(T.elementwise(op, t, Tensor(b))), x)
    assert error < 1e-4
    error = T.grad_check(lambda t: T.sum_(T.elementwise(op, Tensor(x), t)), b)
    assert error < 1e-4


@pytest.mark.parametrize("fn", [T.sqrt, T.tanh, T.sigmoid, T.neg, T.absolute])
def test_unary_ops_match_finite_differences(rng, fn):
    x = rng.uniform(0.1, 1.0, size=6)
    assert T.grad_check(lambda t: T.sum_(fn(t) * fn(t)), x) < 1e-4


def test_reductions():
    assert T.reduce("mean", Tensor([2.0, 4.0, 6.0])).item() == 4.0
    x = Tensor(np.ones(4), requires_grad=True)
    T.backward(T.mean(x))
    assert np.array_equal(x.grad, np.full(4, 0.25))


def test_max_routes_gradient_to_argmax_only():
    x = Tensor([1.0, 5.0, 3.0], requires_grad=True)
    out = T.reduce("max", x)
    T.backward(out)
    assert out.item() == 5.0
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_reduction_of_empty_tensor_raises():
    with pytest.raises(ValueError):
        T.sum_(Tensor(np.zeros(0)))


def test_matmul_identity_and_scalar_case():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data[0, 0] == 6.0


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_gradients(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    T.backward(T.sum_(ta @ tb))
    g = np.ones((3, 2))
    assert np.allclose(ta.grad, g @ b.T)
    assert np.allclose(tb.grad, a.T @ g)


def test_matmul_dimension_mismatch():
    with pytest.raises(TensorShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((1, 4, 5))
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1)))).data, x)


def test_conv2d_averaging_preserves_constants():
    out = T.conv2d(Tensor(np.full((1, 6, 6), 0.7)), Tensor(np.full((1, 2, 2), 0.25)))
    assert out.shape == (1, 5, 5)
    assert np.allclose(out.data, 0.7, atol=1e-15)


def test_conv2d_matches_nested_loop(rng):
    x, k = rng.standard_normal((1, 5, 5)), rng.standard_normal((1, 3, 3))
    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            expected[i, j] = np.sum(x[0, i:i + 3, j:j + 3] * k[0])
    assert np.allclose(T.conv2d(Tensor(x), Tensor(k)).data[0], expected, atol=1e-12)


def test_conv2d_strided_output_size_and_gradients(rng):
    x, k = rng.uniform(-1, 1, (2, 7, 6)), rng.uniform(-1, 1, (3, 2, 3, 2))
    out = T.conv2d(Tensor(x), Tensor(k), stride=2)
    assert out.shape == (3, 3, 3)
    assert T.grad_check(lambda t: T.sum_(T.conv2d(t, Tensor(k), stride=2) ** 2.0), x) < 1e-4
    assert T.grad_check(lambda t: T.sum_(T.conv2d(Tensor(x), t, stride=2) ** 2.0), k) < 1e-4


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(TensorShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 3, 3))))


def test_downsample2x_examples(rng):
    assert np.array_equal(T.downsample2x(Tensor(np.ones((2, 2)))).data, [[1.0]])
    assert np.array_equal(T.downsample2x(Tensor([[0.0, 2.0], [4.0, 6.0]])).data, [[3.0]])
    x = rng.standard_normal((5, 5))
    expected = np.array([[x[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(2)] for i in range(2)])
    assert np.allclose(T.downsample2x(Tensor(x)).data, expected, atol=1e-15)


def test_downsample2x_gradient_and_small_input(rng):
    x = rng.uniform(-1, 1, (2, 5, 4))
    assert T.grad_check(lambda t: T.sum_(T.downsample2x(t) ** 2.0), x) < 1e-4
    with pytest.raises(TensorShapeError):
        T.downsample2x(Tensor(np.ones((1, 3))))


def test_backward_examples():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    T.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones(3))

    y = Tensor(3.0, requires_grad=True)
    T.backward(y * y)
    assert y.grad == 6.0


def test_backward_accumulates_until_zero_grad():
    y = Tensor(3.0, requires_grad=True)
    T.backward(y * y)
    T.backward(y * y)
    assert y.grad == 12.0
    y.zero_grad()
    T.backward(y * y)
    assert y.grad == 6.0


def test_backward_rejects_non_scalar_loss():
    with pytest.raises(TensorShapeError):
        T.backward(Tensor(np.ones(2), requires_grad=True) * 2.0)


def test_constant_leaf_keeps_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    T.backward(T.sum_(x * c))
    assert c.grad is None
    assert np.array_equal(x.grad, [3.0, 4.0])


def test_shared_subexpression_visited_once():
    x = Tensor(2.0, requires_grad=True)
    h = x * x
    T.backward(h * h + h)
    # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert x.grad == pytest.approx(36.0)


def test_forward_is_deterministic(rng):
    x, k = rng.standard_normal((3, 9, 9)), rng.standard_normal((4, 3, 3, 3))
    first = T.conv2d(Tensor(x), Tensor(k), stride=2).data
    second = T.conv2d(Tensor(x), Tensor(k), stride=2).data
    assert np.array_equal(first, second)


def test_grad_check_examples(rng):
    x = rng.standard_normal(6)
    assert T.grad_check(lambda t: T.sum_(t * t), x, eps=1e-5) < 1e-6
    assert T.grad_check(lambda t: Tensor(4.0), x) == 0.0


def test_grad_check_rejects_non_finite_function():
    with pytest.raises(ValueError):
        T.grad_check(lambda t: Tensor(np.inf), np.ones(2))
