import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dialrank.errors import ShapeError
from dialrank.gradcheck import check_gradients, numerical_gradient, relative_error
from dialrank.tensor import (Tensor, add, backward, broadcast_rows, clear_tape, concat, elementwise, expand,
                             get_tape, l2_normalize, log_softmax, matmul, mean, mul, no_grad, power_norm,
                             reshape, scale, sigmoid, slice_axis, softmax, sub, sum_, take, tanh, transpose)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


class TestForward:
    def test_matmul_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_matmul_hand_value(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_matmul_with_shared_right(self, rng):
        a = rng.normal(size=(4, 2, 3))
        b = rng.normal(size=(3, 5))
        assert np.allclose(matmul(Tensor(a), Tensor(b)).data, np.einsum("bij,jk->bik", a, b))

    def test_elementwise(self):
        x = Tensor([1.0, 2.0])
        assert elementwise(x, Tensor([3.0, 4.0]), "add").data.tolist() == [4.0, 6.0]
        assert np.array_equal(elementwise(x, Tensor(np.ones(2)), "mul").data, x.data)
        with pytest.raises(ValueError):
            elementwise(x, x, "pow")

    def test_no_implicit_broadcast(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_softmax_cases(self):
        assert np.allclose(softmax(Tensor(np.zeros(3))).data, 1 / 3, atol=0, rtol=1e-15)
        big = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300

    def test_softmax_matches_formula(self, rng):
        x = rng.normal(size=4)
        e = np.exp(x)
        assert np.max(np.abs(softmax(Tensor(x)).data - e / e.sum())) < 1e-12

    def test_softmax_bad_axis(self):
        with pytest.raises(ValueError):
            softmax(Tensor(np.zeros((2, 2))), axis=2)

    def test_power_norm_values(self):
        assert power_norm(Tensor([4.0, -9.0, 0.0])).data.tolist() == [2.0, -3.0, 0.0]

    def test_l2_normalize_values(self):
        assert np.allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)
        assert l2_normalize(Tensor([0.0, 0.0])).data.tolist() == [0.0, 0.0]

    def test_l2_normalize_norms(self, rng):
        y = l2_normalize(Tensor(rng.normal(size=(50, 7))), axis=-1).data
        assert np.max(np.abs(np.linalg.norm(y, axis=1) - 1)) < 1e-12

    def test_take_and_slice(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        assert take(x, [3, 0]).data.tolist() == [[9, 10, 11], [0, 1, 2]]
        assert slice_axis(x, 1, 3, axis=-1).data.tolist() == [[1, 2], [4, 5], [7, 8], [10, 11]]

    def test_broadcast_rows(self):
        out = broadcast_rows(Tensor([1.0, 2.0]), 3)
        assert out.shape == (3, 2) and np.all(out.data == [1.0, 2.0])

    def test_item_requires_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_reshape_error(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros(6)), (4, 2))


class TestTape:
    def test_sum_gradient_is_ones(self, rng):
        x = param(rng, 3, 2)
        backward(sum_(x))
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_square_gradient(self, rng):
        x = param(rng, 5)
        backward(sum_(mul(x, x)))
        assert np.allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)

    def test_reused_tensor_accumulates(self, rng):
        x = param(rng, 4)
        backward(sum_(add(add(x, x), x)))
        assert np.array_equal(x.grad, np.full(4, 3.0))

    def test_backward_overwrites(self, rng):
        x = param(rng, 2)
        backward(sum_(x))
        clear_tape()
        backward(sum_(scale(x, 2.0)))
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss(self, rng):
        with pytest.raises(ShapeError):
            backward(param(rng, 2) * param(rng, 2))

    def test_topological_order(self, rng):
        clear_tape()
        x = param(rng, 3)
        y = tanh(x)
        z = sum_(mul(y, y))
        nodes = get_tape().nodes
        produced = {id(n.output): i for i, n in enumerate(nodes)}
        for i, node in enumerate(nodes):
            assert all(produced.get(id(t), -1) < i for t in node.inputs)
        assert nodes[-1].output is z

    def test_no_grad_records_nothing(self, rng):
        x = param(rng, 3)
        clear_tape()
        with no_grad():
            y = tanh(x)
        assert len(get_tape()) == 0 and not y.requires_grad

    def test_constants_do_not_record(self):
        clear_tape()
        tanh(Tensor([1.0]))
        assert len(get_tape()) == 0


# Each case builds a scalar from freshly drawn inputs; all entries checked by
# central differences.
def _cases(rng):
    a23, b23 = param(rng, 2, 3), param(rng, 2, 3)
    a34, b42 = param(rng, 3, 4), param(rng, 4, 2)
    w = Tensor(rng.normal(size=(2, 3)))
    far = Tensor(rng.choice([-1, 1], size=(2, 3)) * rng.uniform(0.2, 2, size=(2, 3)), requires_grad=True)
    bat, shared = param(rng, 2, 3, 4), param(rng, 4, 2)
    row = param(rng, 1, 3)
    v = param(rng, 3)
    w43, w22, w33 = (Tensor(rng.normal(size=s)) for s in ((4, 3), (2, 2), (3, 3)))
    return {
        "matmul": (lambda: sum_(matmul(a34, b42)), [a34, b42]),
        "batched_matmul": (lambda: sum_(mul(matmul(bat, shared), Tensor(np.arange(12.0).reshape(2, 3, 2)))),
                           [bat, shared]),
        "add": (lambda: sum_(mul(add(a23, b23), w)), [a23, b23]),
        "sub": (lambda: sum_(mul(sub(a23, b23), w)), [a23, b23]),
        "mul": (lambda: sum_(mul(a23, b23)), [a23, b23]),
        "scale_mean": (lambda: mean(mul(scale(a23, 1.7), w)), [a23]),
        "sum_axis": (lambda: sum_(mul(sum_(a23, axis=0), Tensor([1.0, -2.0, 3.0]))), [a23]),
        "reshape_transpose": (lambda: sum_(mul(transpose(reshape(a23, (3, 2))), w)), [a23]),
        "expand": (lambda: sum_(mul(expand(row, (2, 3)), w)), [row]),
        "concat": (lambda: sum_(mul(concat([a23, b23], axis=0), w43)), [a23, b23]),
        "slice": (lambda: sum_(mul(slice_axis(a23, 1, 3), w22)), [a23]),
        "take": (lambda: sum_(mul(take(a23, [1, 0, 1]), w33)), [a23]),
        "sigmoid": (lambda: sum_(mul(sigmoid(a23), w)), [a23]),
        "tanh": (lambda: sum_(mul(tanh(a23), w)), [a23]),
        "softmax": (lambda: sum_(mul(softmax(a23, axis=-1), w)), [a23]),
        "softmax_axis0": (lambda: sum_(mul(softmax(a23, axis=0), w)), [a23]),
        "log_softmax": (lambda: sum_(mul(log_softmax(a23), w)), [a23]),
        "power_norm": (lambda: sum_(mul(power_norm(far), w)), [far]),
        "l2_normalize": (lambda: sum_(mul(l2_normalize(a23, axis=-1), w)), [a23]),
        "vector_ops": (lambda: sum_(mul(tanh(v), v)), [v]),
    }


CASE_NAMES = list(_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", CASE_NAMES)
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients(name, seed):
    fn, inputs = _cases(np.random.default_rng(seed))[name]
    errs = check_gradients(fn, inputs)
    assert max(errs.values()) < 1e-5, errs


def test_power_norm_gradient_at_zero_is_zero():
    x = Tensor([0.0, 4.0], requires_grad=True)
    backward(sum_(power_norm(x)))
    assert x.grad.tolist() == [0.0, 0.25]


def test_numerical_gradient_quadratic():
    x = np.array([1.0, -2.0])
    g = numerical_gradient(lambda: float(np.sum(x ** 3)), x, richardson=True)
    assert np.allclose(g, 3 * np.array([1.0, 4.0]), rtol=1e-9)
    assert relative_error(g, g) == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_is_a_distribution(x):
    y = softmax(Tensor(x), axis=-1).data
    assert np.all(y > 0)
    assert np.max(np.abs(y.sum(axis=-1) - 1)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_power_norm_is_odd(x):
    assert np.array_equal(power_norm(Tensor(-x)).data, -power_norm(Tensor(x)).data)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_l2_rows_unit_or_zero(x):
    n = np.linalg.norm(l2_normalize(Tensor(x), axis=-1).data, axis=-1)
    assert np.all((np.abs(n - 1) < 1e-12) | (n < 1e-12))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
def test_forward_is_deterministic(x):
    f = lambda: l2_normalize(power_norm(softmax(Tensor(x)))).data  # noqa: E731
    assert f().tobytes() == f().tobytes()
