"""Estimating-function and solver tests."""

import numpy as np
import pytest

from blockmiss import errors
from blockmiss.estfun import (
    LinearRegression,
    OutcomeMean,
    finite_difference_jacobian,
    solve_root,
)


def mean_blocks(y):
    return {"Y": np.asarray(y, dtype=float).reshape(-1, 1)}


class TestOutcomeMean:
    def test_root_at_truth(self):
        ef = OutcomeMean("Y")
        np.testing.assert_allclose(ef.evaluate(mean_blocks([3.0]), np.array([3.0])), 0.0)

    def test_arithmetic(self):
        ef = OutcomeMean("Y")
        np.testing.assert_allclose(
            ef.evaluate(mean_blocks([5.0]), np.array([2.0])), [[3.0]]
        )

    def test_solve_matches_sample_mean(self):
        ef = OutcomeMean("Y")
        blocks = mean_blocks([1, 2, 3, 6])
        theta = solve_root(
            lambda t: ef.evaluate(blocks, t).mean(axis=0),
            lambda t: ef.jacobian(blocks, t).mean(axis=0),
            np.zeros(1),
            affine=True,
        )
        assert theta[0] == pytest.approx(3.0, abs=1e-12)

    def test_missing_modality(self):
        ef = OutcomeMean("Y")
        with pytest.raises(errors.MissingModality):
            ef.evaluate({"X1": np.ones((2, 1))}, np.zeros(1))
        with pytest.raises(errors.MissingModality):
            ef.evaluate(mean_blocks([1.0, np.nan]), np.zeros(1))


class TestLinearRegression:
    def setup_method(self):
        self.ef = LinearRegression(("X1", "X2"), "Y", dims=(2, 1))
        rng = np.random.default_rng(0)
        self.x1 = rng.standard_normal((6, 2))
        self.x2 = rng.standard_normal((6, 1))
        self.beta = np.array([1.0, -2.0, 0.5])

    def blocks(self, y):
        return {"X1": self.x1, "X2": self.x2, "Y": y.reshape(-1, 1)}

    def test_zero_residual_at_unit_vector(self):
        x1 = np.array([[1.0, 0.0]])
        blocks = {"X1": x1, "X2": np.zeros((1, 1)), "Y": np.array([[2.0]])}
        theta = np.array([2.0, 5.0, 7.0])
        np.testing.assert_allclose(self.ef.evaluate(blocks, theta), 0.0, atol=1e-14)

    def test_exact_on_noiseless(self):
        y = np.hstack([self.x1, self.x2]) @ self.beta
        blocks = self.blocks(y)
        theta = solve_root(
            lambda t: self.ef.evaluate(blocks, t).mean(axis=0),
            lambda t: self.ef.jacobian(blocks, t).mean(axis=0),
            np.zeros(3),
            affine=True,
        )
        np.testing.assert_allclose(theta, self.beta, atol=1e-10)

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(1)
        y = np.hstack([self.x1, self.x2]) @ self.beta + rng.standard_normal(6)
        blocks = self.blocks(y)
        theta = solve_root(
            lambda t: self.ef.evaluate(blocks, t).mean(axis=0),
            lambda t: self.ef.jacobian(blocks, t).mean(axis=0),
            np.zeros(3),
            affine=True,
        )
        x = np.hstack([self.x1, self.x2])
        oracle = np.linalg.solve(x.T @ x, x.T @ y)
        np.testing.assert_allclose(theta, oracle, atol=1e-10)


class TestJacobians:
    @pytest.mark.parametrize("which", ["mean", "ols"])
    def test_finite_difference_agreement(self, which):
        rng = np.random.default_rng(42)
        for _ in range(100):
            if which == "mean":
                ef = OutcomeMean("Y")
                blocks = mean_blocks(rng.standard_normal(1))
                theta = rng.standard_normal(1)
            else:
                ef = LinearRegression(("X1", "X2"), "Y", dims=(2, 2))
                blocks = {
                    "X1": rng.standard_normal((1, 2)),
                    "X2": rng.standard_normal((1, 2)),
                    "Y": rng.standard_normal((1, 1)),
                }
                theta = rng.standard_normal(4)
            jac = ef.jacobian(blocks, theta)[0]
            fd = finite_difference_jacobian(lambda t: ef.evaluate(blocks, t)[0], theta)
            denom = max(np.abs(jac).max(), 1.0)
            assert np.abs(jac - fd).max() / denom < 1e-6


class TestSolveRoot:
    def test_affine_one_step(self):
        a = np.array([[2.0, 0.3], [0.1, 1.5]])
        target = np.array([1.0, -2.0])
        calls = {"n": 0}

        def resid(t):
            calls["n"] += 1
            return a @ (t - target)

        theta = solve_root(resid, lambda t: a, np.zeros(2), affine=True)
        np.testing.assert_allclose(theta, target, atol=1e-12)
        assert calls["n"] <= 2  # initial evaluation plus the one-step check

    def test_newton_matches_affine_path(self):
        a = np.array([[2.0, 0.3], [0.1, 1.5]])
        target = np.array([1.0, -2.0])
        t_affine = solve_root(lambda t: a @ (t - target), lambda t: a, np.zeros(2), affine=True)
        t_newton = solve_root(lambda t: a @ (t - target), lambda t: a, np.zeros(2), affine=False)
        np.testing.assert_allclose(t_affine, t_newton, atol=1e-10)

    def test_weighted_mean_closed_form(self):
        rng = np.random.default_rng(2)
        y = rng.standard_normal(50)
        w = rng.uniform(0.5, 2.0, size=50)

        def resid(t):
            return np.array([np.mean(w * (y - t[0]))])

        theta = solve_root(resid, lambda t: np.array([[-np.mean(w)]]), np.zeros(1))
        oracle = np.sum(w * y) / np.sum(w)
        assert theta[0] == pytest.approx(oracle, abs=1e-12)

    def test_nonlinear(self):
        def resid(t):
            return np.array([np.tanh(t[0]) - 0.5])

        def jac(t):
            return np.array([[1.0 / np.cosh(t[0]) ** 2]])

        theta = solve_root(resid, jac, np.array([2.0]))
        assert theta[0] == pytest.approx(np.arctanh(0.5), abs=1e-9)

    def test_singular_jacobian(self):
        ef = LinearRegression(("X1",), "Y", dims=(2,))
        x = np.ones((5, 2))  # duplicated column: rank deficient
        blocks = {"X1": x, "Y": np.arange(5.0).reshape(-1, 1)}
        with pytest.raises(errors.SingularJacobian):
            solve_root(
                lambda t: ef.evaluate(blocks, t).mean(axis=0),
                lambda t: ef.jacobian(blocks, t).mean(axis=0),
                np.zeros(2),
            )

    def test_no_convergence(self):
        with pytest.raises(errors.NoConvergence):
            solve_root(
                lambda t: np.array([1.0 + t[0] ** 2]),  # no real root
                lambda t: np.array([[2.0 * t[0] + 1e-3]]),
                np.array([1.0]),
                max_iter=20,
            )
