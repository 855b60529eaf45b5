import numpy as np
import pytest

from aspcnet import ops
from aspcnet.gradcheck import check_params, finite_diff_check, numerical_gradient, relative_error
from aspcnet.tensor import Tensor


class TestFiniteDifference:
    def test_linear_sum_exact(self):
        err = finite_diff_check(lambda x: ops.sum(x), Tensor(np.arange(6.0).reshape(2, 3)))
        assert err <= 1e-9

    def test_l2norm_hand_derivative(self, f64):
        x = Tensor([3.0, 4.0])
        np.testing.assert_allclose(numerical_gradient(lambda: ops.l2norm(x), x), [0.6, 0.8], atol=1e-9)
        assert finite_diff_check(lambda p: ops.l2norm(p), x) <= 1e-6

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            finite_diff_check(lambda x: ops.scale(x, 2.0), Tensor([1.0, 2.0]))

    def test_requires_f64(self):
        with pytest.raises(ValueError, match="float64"):
            check_params(lambda: ops.sum(p), [p := Tensor(np.ones(2, dtype=np.float32))])

    def test_detects_wrong_gradient(self, f64):
        # a wrong backward rule must be caught
        from aspcnet.tensor import record

        def bad_square(a):
            return record("bad", a.data ** 2, (a,), lambda g: (g * a.data,))

        x = Tensor([1.0, 2.0, 3.0])
        assert finite_diff_check(lambda p: ops.sum(bad_square(p)), x) > 0.1

    def test_relative_error_scale_free(self):
        a = np.array([1.0, 2.0])
        assert relative_error(a, a) == 0.0
        assert relative_error(1e6 * a, 1e6 * (a + 1e-3)) == pytest.approx(relative_error(a, a + 1e-3))

    def test_subset_coordinates(self, f64):
        x = Tensor(np.linspace(-1, 1, 50))
        errs = check_params(lambda: ops.sum(ops.exp(x)), [x], max_coords=5)
        assert errs[0] <= 1e-8
