# tests/unit/test_numerics.py
import numpy as np
import pytest

from src.numerics import (
    AdamState,
    adam_step,
    finite_diff_gradient,
    flatten_params,
    l2_normalize,
    normalize_rows,
    relative_error,
    unflatten_params,
)
from src.utils.errors import ContractViolation, DegenerateVectorError, NonFiniteGradientError, OracleError

pytestmark = pytest.mark.unit


class TestAdamStep:
    """测试 Adam 更新"""

    def test_single_step_hand_value(self):
        state = AdamState.zeros(1, learning_rate=0.001)
        params = adam_step(np.array([0.0]), np.array([1.0]), state)

        assert params[0] == pytest.approx(-0.000999999990, abs=1e-12)
        assert state.step_count == 1

    def test_zero_gradient_leaves_params_identical(self):
        state = AdamState.zeros(3)
        params = np.array([0.3, -1.2, 5.0])
        original = params.copy()

        for _ in range(7):
            params = adam_step(params, np.zeros(3), state)

        assert np.array_equal(params, original)
        assert state.step_count == 7
        assert np.all(state.first_moment == 0)

    def test_constant_gradient_decreases_params(self):
        state = AdamState.zeros(1)
        first = adam_step(np.array([1.0]), np.array([1.0]), state)
        second = adam_step(first, np.array([1.0]), state)

        assert second[0] < first[0] < 1.0

    def test_length_mismatch(self):
        state = AdamState.zeros(2)
        with pytest.raises(ContractViolation):
            adam_step(np.zeros(3), np.zeros(3), state)

    def test_non_finite_gradient_reports_index(self):
        state = AdamState.zeros(3)
        with pytest.raises(NonFiniteGradientError) as exc_info:
            adam_step(np.zeros(3), np.array([0.0, np.inf, np.nan]), state)

        assert exc_info.value.index == 1
        assert state.step_count == 0

    def test_invalid_hyperparameters(self):
        with pytest.raises(ContractViolation):
            AdamState.zeros(2, learning_rate=0.0)
        with pytest.raises(ContractViolation):
            AdamState.zeros(2, beta1=1.0)


class TestFiniteDifference:
    """测试中心差分梯度"""

    def test_square(self):
        grad = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]))
        assert grad[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        grad = finite_diff_gradient(lambda x: 4.2, np.array([1.0, -2.0, 0.5]))
        assert np.array_equal(grad, np.zeros(3))

    def test_product(self):
        grad = finite_diff_gradient(lambda x: float(x[0] * x[1]), np.array([2.0, 5.0]))
        assert grad == pytest.approx([5.0, 2.0], abs=1e-6)

    def test_does_not_mutate_input(self):
        at = np.array([1.0, 2.0])
        finite_diff_gradient(lambda x: float(np.sum(x ** 3)), at)
        assert np.array_equal(at, [1.0, 2.0])

    def test_non_finite_reports_coordinate(self):
        def f(x):
            return float(x[0] + np.log(x[1])) if x[1] > 0 else float('nan')

        with pytest.raises(OracleError) as exc_info:
            finite_diff_gradient(f, np.array([1.0, 1e-9]))

        assert exc_info.value.coordinate == 1


class TestNormalization:
    """测试 l2 归一化"""

    def test_hand_value(self):
        assert l2_normalize(np.array([3.0, 4.0])) == pytest.approx([0.6, 0.8])

    def test_unit_vector_unchanged(self):
        v = np.array([0.0, 1.0, 0.0])
        assert np.allclose(l2_normalize(v), v, atol=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DegenerateVectorError):
            l2_normalize(np.zeros(2))

    def test_idempotent(self, rng):
        v = rng.standard_normal(9)
        once = l2_normalize(v)
        assert np.allclose(l2_normalize(once), once, atol=1e-12)

    def test_normalize_rows_reports_row(self):
        matrix = np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 2.0]])
        with pytest.raises(DegenerateVectorError) as exc_info:
            normalize_rows(matrix)
        assert exc_info.value.index == 1

    def test_normalize_rows_returns_norms(self):
        normalized, norms = normalize_rows(np.array([[3.0, 4.0], [0.0, 2.0]]))
        assert norms == pytest.approx([5.0, 2.0])
        assert np.allclose(np.linalg.norm(normalized, axis=1), 1.0)


class TestParamVectors:
    """测试参数展平"""

    def test_unflatten_shapes(self):
        arrays = [np.arange(6.0).reshape(2, 3), np.array([7.0, 8.0, 9.0])]
        vec = flatten_params(arrays)
        restored = unflatten_params(vec, [(2, 3), (3,)])

        assert vec.shape == (9,)
        assert np.array_equal(restored[0], arrays[0])
        assert np.array_equal(restored[1], arrays[1])

    def test_unflatten_length_mismatch(self):
        with pytest.raises(ContractViolation):
            unflatten_params(np.zeros(5), [(2, 3)])

    def test_relative_error_floor(self):
        err = relative_error(np.array([1e-9, 1.0]), np.array([2e-9, 1.1]))
        assert err[0] < 1e-4
        assert err[1] == pytest.approx(0.1 / 1.1)
