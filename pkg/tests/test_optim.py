import numpy as np
import pytest

from cmalign.autodiff import NumericError, Tensor
from cmalign.optim import Adam, NonFiniteGradientError, check_gradient


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        # bias-corrected first step: m_hat/sqrt(v_hat) = sign(g) up to eps
        for g in (0.5, -0.5, 2.0):
            params = {"p": np.array([0.0])}
            opt = Adam(params, lr=0.1)
            opt.step(params, {"p": np.array([g])})
            assert abs(params["p"][0] - (-0.1 * np.sign(g))) <= 1e-6

    def test_zero_gradient_leaves_params_unchanged(self):
        params = {"p": np.array([1.0, -2.0, 3.0])}
        opt = Adam(params, lr=0.1)
        opt.step(params, {"p": np.zeros(3)})
        np.testing.assert_array_equal(params["p"], [1.0, -2.0, 3.0])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            params = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
            opt = Adam(params, lr=0.01)
            for _ in range(5):
                opt.step(params, {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)})
            return params

        first, second = run(), run()
        for k in first:
            np.testing.assert_array_equal(first[k], second[k])

    def test_step_count_increments(self):
        params = {"p": np.zeros(2)}
        opt = Adam(params, lr=0.1)
        for expected in (1, 2, 3):
            opt.step(params, {"p": np.ones(2)})
            assert opt.step_count == expected

    def test_nonfinite_gradient_aborts_without_mutation(self):
        params = {"a": np.ones(3), "b": np.ones(2)}
        opt = Adam(params, lr=0.1)
        bad = {"a": np.ones(3), "b": np.array([1.0, np.inf])}
        with pytest.raises(NonFiniteGradientError) as exc:
            opt.step(params, bad)
        assert exc.value.param_name == "b"
        assert exc.value.flat_index == 1
        np.testing.assert_array_equal(params["a"], np.ones(3))
        np.testing.assert_array_equal(params["b"], np.ones(2))
        assert opt.step_count == 0

    def test_momentum_defaults(self):
        opt = Adam({"p": np.zeros(1)})
        assert opt.beta1 == 0.9 and opt.beta2 == 0.999 and opt.eps == 1e-8


class TestCheckGradient:
    def test_quadratic(self):
        # f(x) = x^2 at x=3: analytic 6, central difference 6 +- 1e-7
        report = check_gradient(lambda t: (t * t).sum(), np.array([3.0]), tol=1e-6)
        assert report.passed
        assert report.n_coordinates == 1

    def test_quadratic_numeric_value(self):
        vals = []

        def f(t):
            vals.append(t.value.copy())
            return (t * t).sum()

        check_gradient(f, np.array([3.0]))
        # calls: base, then +-step
        numeric = (vals[1][0] ** 2 - vals[2][0] ** 2) / (2 * 1e-5)
        assert abs(numeric - 6.0) <= 1e-7

    def test_linear_sum(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 3))
        report = check_gradient(lambda t: t.sum(), x, tol=1e-8)
        assert report.passed

    def test_detects_wrong_gradient(self):
        import cmalign.autodiff as ad

        def mismatched(t):
            out = ad.mul(t, t).sum()
            out._backward = lambda g: None  # sever the gradient path
            return out

        report = check_gradient(mismatched, np.array([3.0]), tol=1e-4)
        assert not report.passed
        assert report.worst_index == 0

    def test_nonfinite_loss_is_diagnosed(self):
        def f(t):
            return Tensor(np.nan)

        with pytest.raises(NumericError):
            check_gradient(f, np.array([1.0]))
